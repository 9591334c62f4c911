use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use mme_core::diagnostics::gradient_suite;
use mme_core::diff::{load_checkpoint, save_checkpoint, Mat};
use mme_core::experts::{build_experts, pretrain_expert, Expert, SupervisedConfig};
use mme_core::gate::{average_pretrained_gates, Gate, HeadMode};
use mme_core::mesh::{load_off, Dataset, Mesh, Task};
use mme_core::metrics::{report_csv, MetricRow};
use mme_core::moe::{
    evaluate, evaluate_ensemble, experts_to_params, imitation_gates, load_expert_params, score_outputs, train_run,
    LambdaPolicy, MoeSystem, StaticLambda,
};
use mme_core::rng::{derive_seed, hash_str};
use mme_core::sac::SacAgent;
use mme_core::synth::{generate_classification_set, generate_segmentation_set, read_dataset, write_dataset};
use mme_core::walk::{extract_walks, format_walks};

use crate::config::{parse_range, RunConfig};
use crate::manifest::write_manifest;
use crate::{Cli, Command, Common};

pub const EXPERTS_CKPT: &str = "experts.ckpt";
pub const GATE_INIT_CKPT: &str = "gate_init.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAIN_LOG: &str = "train_log.csv";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    argv: Vec<String>,
}

impl Ctx {
    fn data_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().or_else(|| self.cfg.data.dir.clone()).unwrap_or_else(|| self.out.join("data"))
    }

    fn manifest(&self, command: &str, inputs: &[PathBuf]) -> Result<()> {
        write_manifest(&self.out, command, &self.argv, &self.cfg, inputs)?;
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn apply_flags(cfg: &mut RunConfig, common: &Common, command: &Command) -> Result<()> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(ids) = &common.experts {
        cfg.experts.ids = ids.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(w) = common.walks_train {
        cfg.trainer.walks_train = w;
    }
    if let Some(w) = common.walks_infer {
        cfg.trainer.walks_infer = w;
    }
    if let Some(r) = &common.lambda_range {
        cfg.agent.lambda_range = parse_range(r)?;
    }
    let (epochs, batch) = match command {
        Command::PretrainExperts { .. } => (&mut cfg.experts.epochs, &mut cfg.experts.batch_size),
        Command::PretrainGate { .. } => (&mut cfg.gate.imitation_epochs, &mut cfg.gate.imitation_batch_size),
        _ => (&mut cfg.trainer.epochs, &mut cfg.trainer.batch_size),
    };
    if let Some(e) = common.epochs {
        *epochs = e;
    }
    if let Some(b) = common.batch_size {
        *batch = b;
    }
    match command {
        Command::GenData { task, classes, per_class } => {
            if let Some(t) = task {
                cfg.data.task = t.parse().map_err(|e| anyhow!("{e}"))?;
            }
            if let Some(c) = classes {
                cfg.data.classes = *c;
            }
            if let Some(p) = per_class {
                cfg.data.per_class = *p;
            }
        }
        Command::Train { static_lambda, loss_sim, .. } => {
            if static_lambda.is_some() {
                cfg.trainer.static_lambda = *static_lambda;
            }
            if let Some(s) = loss_sim {
                cfg.trainer.similarity = s.parse().map_err(|e| anyhow!("{e}"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn model_path(out: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| out.join(MODEL_CKPT))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.common.out_dir.clone();
    let mut cfg = RunConfig::default();
    // Evaluation starts from the configuration the model was trained with.
    if let Command::Eval { checkpoint, .. } = &cli.command {
        let sidecar = model_path(&out, checkpoint).with_extension("ini");
        if sidecar.exists() {
            cfg.apply_file(&sidecar)?;
        }
    }
    if let Some(p) = &cli.common.config {
        cfg.apply_file(p)?;
    }
    apply_flags(&mut cfg, &cli.common, &cli.command)?;
    let ctx = Ctx { cfg, out, argv: std::env::args().collect() };
    match &cli.command {
        Command::GenData { .. } => gen_data(&ctx),
        Command::PretrainExperts { data } => pretrain_experts(&ctx, data),
        Command::PretrainGate { data, experts_ckpt } => pretrain_gate(&ctx, data, experts_ckpt),
        Command::InitGate { inputs, num_experts, num_classes } => init_gate(&ctx, inputs, *num_experts, *num_classes),
        Command::Train { data, experts_ckpt, gate_ckpt, .. } => train(&ctx, data, experts_ckpt, gate_ckpt),
        Command::Eval { data, checkpoint, ensemble, split } => eval(&ctx, data, checkpoint, *ensemble, split),
        Command::DumpWalks { mesh, data, count } => dump_walks(&ctx, mesh, data, *count),
        Command::Gradcheck => gradcheck(&ctx),
        Command::PlotLambda { log } => plot_lambda(&ctx, log),
    }
}

fn gen_data(ctx: &Ctx) -> Result<ExitCode> {
    let d = &ctx.cfg.data;
    let ds = match d.task {
        Task::Segmentation => generate_segmentation_set(d.per_class, ctx.cfg.seed)?,
        task => {
            let mut ds = generate_classification_set(d.classes, d.per_class, ctx.cfg.seed)?;
            ds.task = task;
            ds
        }
    };
    let dir = ctx.data_dir(&None);
    write_dataset(&ds, &dir)?;
    println!(
        "wrote {} {} meshes ({} train, {} test, {} labels) to {}",
        ds.meshes.len(),
        ds.task.as_str(),
        ds.train.len(),
        ds.test.len(),
        ds.num_classes,
        dir.display()
    );
    ctx.manifest("gen-data", &[])?;
    Ok(ExitCode::SUCCESS)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn fresh_experts(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Expert>> {
    let ids = cfg.expert_ids();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    Ok(build_experts(&refs, ds.num_classes, cfg.experts.hidden, cfg.seed)?)
}

/// Experts with parameters from `explicit`, or from the run directory's
/// expert checkpoint when present. Returns the checkpoint used.
fn load_experts(ctx: &Ctx, ds: &Dataset, explicit: &Option<PathBuf>) -> Result<(Vec<Expert>, Option<PathBuf>)> {
    let mut experts = fresh_experts(&ctx.cfg, ds)?;
    let path = match explicit {
        Some(p) if !p.exists() => bail!("missing checkpoint {}", p.display()),
        Some(p) => Some(p.clone()),
        None => Some(ctx.out.join(EXPERTS_CKPT)).filter(|p| p.exists()),
    };
    match &path {
        Some(p) => load_expert_params(&mut experts, &load_checkpoint(p)?).with_context(|| format!("loading {}", p.display()))?,
        None if experts.iter().any(Expert::is_trainable) => {
            bail!("missing checkpoint {}; run pretrain-experts first", ctx.out.join(EXPERTS_CKPT).display())
        }
        None => {}
    }
    Ok((experts, path))
}

fn expert_scores(ds: &Dataset, expert: &Expert, seed: u64) -> Result<Vec<(String, f64)>> {
    let test = ds.test_meshes();
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let outputs: Vec<Mat> = test
        .iter()
        .map(|m| expert.predict(m, derive_seed(seed, &[hash_str(&m.id)])))
        .collect::<mme_core::Result<_>>()?;
    Ok(score_outputs(ds.task, &test, &outputs)?)
}

fn pretrain_experts(ctx: &Ctx, data: &Option<PathBuf>) -> Result<ExitCode> {
    let dir = ctx.data_dir(data);
    let ds = load_data(&dir)?;
    let mut experts = fresh_experts(&ctx.cfg, &ds)?;
    let train = ds.train_meshes();
    let e = &ctx.cfg.experts;
    let mut csv = String::from("expert,epoch,loss\n");
    for (j, expert) in experts.iter_mut().enumerate() {
        let sup = SupervisedConfig { epochs: e.epochs, lr: e.lr, batch_size: e.batch_size, seed: derive_seed(ctx.cfg.seed, &[j as u64]) };
        let history = pretrain_expert(expert, &train, &sup)?;
        for (epoch, loss) in history.iter().enumerate() {
            let _ = writeln!(csv, "{},{epoch},{loss}", expert.name);
        }
        let scores = expert_scores(&ds, expert, ctx.cfg.seed)?;
        println!("{:<12} final loss {:<10} test {:?}", expert.name, history.last().map_or("-".into(), |l| format!("{l:.4}")), scores);
    }
    save_checkpoint(&experts_to_params(&experts)?, ctx.out.join(EXPERTS_CKPT))?;
    ctx.write("experts_loss.csv", &csv)?;
    ctx.manifest("pretrain-experts", &[dir])?;
    Ok(ExitCode::SUCCESS)
}

fn pretrain_gate(ctx: &Ctx, data: &Option<PathBuf>, experts_ckpt: &Option<PathBuf>) -> Result<ExitCode> {
    let dir = ctx.data_dir(data);
    let ds = load_data(&dir)?;
    let (experts, used) = load_experts(ctx, &ds, experts_ckpt)?;
    let gate_cfg = ctx.cfg.gate_config(experts.len(), ds.num_classes);
    let runs = imitation_gates(&gate_cfg, &experts, &ds.train_meshes(), &ctx.cfg.imitation_config(), ctx.cfg.seed)?;
    let mut csv = String::from("expert,epoch,loss\n");
    let mut sets = Vec::with_capacity(runs.len());
    for (j, (params, history)) in runs.into_iter().enumerate() {
        for (epoch, loss) in history.iter().enumerate() {
            let _ = writeln!(csv, "{},{epoch},{loss}", experts[j].name);
        }
        let path = ctx.out.join(format!("gate_imitation_{j}.ckpt"));
        save_checkpoint(&params, &path)?;
        println!("{:<12} imitation loss {:?} -> {}", experts[j].name, history.last(), path.display());
        sets.push(params);
    }
    let averaged = average_pretrained_gates(&sets, &gate_cfg, ctx.cfg.seed)?;
    save_checkpoint(&averaged, ctx.out.join(GATE_INIT_CKPT))?;
    ctx.write("imitation_loss.csv", &csv)?;
    let mut inputs = vec![dir];
    inputs.extend(used);
    ctx.manifest("pretrain-gate", &inputs)?;
    Ok(ExitCode::SUCCESS)
}

fn init_gate(ctx: &Ctx, inputs: &[PathBuf], num_experts: Option<usize>, num_classes: Option<usize>) -> Result<ExitCode> {
    let sets = inputs
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let gate_cfg = ctx
        .cfg
        .gate_config(num_experts.unwrap_or(inputs.len()), num_classes.unwrap_or(ctx.cfg.data.classes))
        .with_mode(HeadMode::ExpertWeights);
    let averaged = average_pretrained_gates(&sets, &gate_cfg, ctx.cfg.seed)?;
    Gate::from_params(gate_cfg, averaged.clone())?;
    let path = ctx.out.join(GATE_INIT_CKPT);
    save_checkpoint(&averaged, &path)?;
    println!("averaged {} gates into {}", sets.len(), path.display());
    ctx.manifest("init-gate", inputs)?;
    Ok(ExitCode::SUCCESS)
}

fn train(ctx: &Ctx, data: &Option<PathBuf>, experts_ckpt: &Option<PathBuf>, gate_ckpt: &Option<PathBuf>) -> Result<ExitCode> {
    let cfg = &ctx.cfg;
    let dir = ctx.data_dir(data);
    let ds = load_data(&dir)?;
    let (experts, experts_used) = load_experts(ctx, &ds, experts_ckpt)?;
    let gate_cfg = cfg.gate_config(experts.len(), ds.num_classes);
    let gate_path = match gate_ckpt {
        Some(p) if !p.exists() => bail!("missing checkpoint {}", p.display()),
        Some(p) => Some(p.clone()),
        None => Some(ctx.out.join(GATE_INIT_CKPT)).filter(|p| p.exists()),
    };
    let gate = match &gate_path {
        Some(p) => Gate::from_params(gate_cfg, load_checkpoint(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => {
            eprintln!("no pre-trained gate found; starting from a random gate");
            Gate::new(gate_cfg, cfg.seed)?
        }
    };
    let mut system = MoeSystem::new(gate, experts, ds.task)?;
    let mut agent = None;
    let mut policy: Box<dyn LambdaPolicy> = match cfg.trainer.static_lambda {
        Some(l) => Box::new(StaticLambda(l)),
        None => {
            agent = Some(SacAgent::new(system.experts.len(), cfg.agent.clone(), cfg.seed)?);
            Box::new(AgentRef(agent.as_mut().unwrap()))
        }
    };
    let trainer = cfg.trainer_config();
    let test = ds.test_meshes();
    let log = train_run(&mut system, &ds.train_meshes(), policy.as_mut(), &trainer, cfg.trainer.epochs, |epoch, s| {
        if !test.is_empty() {
            let ev = evaluate(s, &test, trainer.walks_infer, cfg.seed)?;
            let shown: Vec<String> = ev.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            println!("epoch {:>3}  test {}", epoch + 1, shown.join(", "));
        }
        Ok(false)
    })?;
    drop(policy);
    let model = ctx.out.join(MODEL_CKPT);
    save_checkpoint(&system.to_params()?, &model)?;
    let mut snapshot = cfg.clone();
    snapshot.data.dir = Some(dir.clone());
    snapshot.data.task = ds.task;
    snapshot.experts.ids = cfg.expert_ids();
    fs::write(model.with_extension("ini"), snapshot.to_ini_string())?;
    if let Some(a) = &agent {
        save_checkpoint(&a.params, ctx.out.join("agent.ckpt"))?;
    }
    ctx.write(TRAIN_LOG, &log.to_csv())?;
    ctx.write("lambda.csv", &log.lambda_csv())?;
    println!("saved {}", model.display());
    let mut inputs = vec![dir];
    inputs.extend(experts_used);
    inputs.extend(gate_path);
    ctx.manifest("train", &inputs)?;
    Ok(ExitCode::SUCCESS)
}

/// Lets the agent stay owned by the caller while training borrows it.
struct AgentRef<'a>(&'a mut SacAgent);

impl LambdaPolicy for AgentRef<'_> {
    fn next_lambda(&mut self, state: &[f64], reward: f64, terminal: bool) -> mme_core::Result<f64> {
        self.0.next_lambda(state, reward, terminal)
    }
}

fn eval(ctx: &Ctx, data: &Option<PathBuf>, checkpoint: &Option<PathBuf>, ensemble: bool, split: &str) -> Result<ExitCode> {
    let cfg = &ctx.cfg;
    let ckpt = model_path(&ctx.out, checkpoint);
    if !ckpt.exists() {
        bail!("missing checkpoint {}", ckpt.display());
    }
    let dir = ctx.data_dir(data);
    let ds = load_data(&dir)?;
    let experts = fresh_experts(cfg, &ds)?;
    let gate = Gate::new(cfg.gate_config(experts.len(), ds.num_classes), cfg.seed)?;
    let mut system = MoeSystem::new(gate, experts, ds.task)?;
    system.load_params(&load_checkpoint(&ckpt)?).with_context(|| format!("loading {}", ckpt.display()))?;
    let meshes: Vec<&Mesh> = match split {
        "test" => ds.test_meshes(),
        "train" => ds.train_meshes(),
        "all" => ds.meshes.iter().collect(),
        other => bail!("unknown split {other:?} (test, train or all)"),
    };
    let ev = if ensemble {
        evaluate_ensemble(&system, &meshes, cfg.seed)?
    } else {
        evaluate(&system, &meshes, cfg.trainer.walks_infer, cfg.seed)?
    };
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let rows: Vec<MetricRow> = ev
        .metrics
        .iter()
        .map(|(metric, value)| MetricRow {
            dataset: name.clone(),
            split: split.to_string(),
            method: ev.method.clone(),
            metric: metric.clone(),
            value: *value,
        })
        .collect();
    let table = report_csv(&rows);
    print!("{table}");
    let path = ctx.out.join(METRICS_CSV);
    fs::create_dir_all(&ctx.out)?;
    let mut existing = fs::read_to_string(&path).unwrap_or_default();
    if existing.is_empty() {
        existing = table;
    } else {
        existing.extend(table.lines().skip(1).map(|l| format!("{l}\n")));
    }
    fs::write(&path, existing)?;
    ctx.manifest("eval", &[dir, ckpt])?;
    Ok(ExitCode::SUCCESS)
}

fn dump_walks(ctx: &Ctx, mesh: &Option<PathBuf>, data: &Option<PathBuf>, count: usize) -> Result<ExitCode> {
    let (meshes, input) = match mesh {
        Some(p) => (vec![load_off(p).with_context(|| format!("reading {}", p.display()))?], p.clone()),
        None => {
            let dir = ctx.data_dir(data);
            (load_data(&dir)?.meshes, dir)
        }
    };
    for m in &meshes {
        let walks = extract_walks(m, count, derive_seed(ctx.cfg.seed, &[hash_str(&m.id)]))?;
        print!("{}", format_walks(&walks));
    }
    ctx.manifest("dump-walks", &[input])?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(ctx: &Ctx) -> Result<ExitCode> {
    let reports = gradient_suite(ctx.cfg.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    ctx.manifest("gradcheck", &[])?;
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn plot_lambda(ctx: &Ctx, log: &Option<PathBuf>) -> Result<ExitCode> {
    let path = log.clone().unwrap_or_else(|| ctx.out.join(TRAIN_LOG));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("{} is empty", path.display()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| anyhow!("{} has no {name} column", path.display()));
    let (e, i, l) = (col("epoch")?, col("iteration")?, col("lambda")?);
    let mut out = String::from("step,epoch,iteration,lambda\n");
    for (step, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let get = |k: usize| cells.get(k).copied().ok_or_else(|| anyhow!("short row {}", step + 2));
        let _ = writeln!(out, "{step},{},{},{}", get(e)?, get(i)?, get(l)?);
    }
    print!("{out}");
    ctx.write("lambda_trace.csv", &out)?;
    ctx.manifest("plot-lambda", &[path])?;
    Ok(ExitCode::SUCCESS)
}
