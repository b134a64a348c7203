use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segviz::fed::{
    accept_clients, client_trainer, connect_tcp, run_client, serve, FedError, HELLO_TIMEOUT,
};
use segviz::harness::{
    self, emit_report, evaluate_model, load_config, load_snapshot, parse_csv, prepare_data, round_log_csv,
    save_arm, to_csv, ArmResult, ExperimentConfig, HarnessError, MetricsRecord, METRICS_FILE,
    SEGVIZ_MODEL,
};
use segviz::synthdata::{class_for_task, export_dataset, generate_node_dataset};

#[derive(Parser)]
#[command(name = "segviz", version, about = "Federated multi-task segmentation on synthetic phantoms")]
struct Cli {
    /// Config file (flat `key = value`); defaults to the shipped desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `KEY=VAL`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VAL")]
    overrides: Vec<String>,
    #[arg(long, global = true, value_parser = ["inproc", "tcp"])]
    transport: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom datasets and write them to `<out>/data`.
    GenData,
    /// Train and evaluate the single-task baseline of one task.
    RunBaseline {
        #[arg(long)]
        task: String,
    },
    /// Run the federation in this process and evaluate the global model.
    RunSegviz,
    /// Federation server for clients in other processes.
    Serve {
        #[arg(long)]
        listen: String,
    },
    /// Federation client for one configured node.
    Client {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        node_id: u16,
    },
    /// Evaluate a saved snapshot on the test set.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        /// Defaults to every head in the snapshot.
        #[arg(long)]
        task: Option<String>,
    },
    /// Collect metrics of earlier runs under `<out>` into report files.
    Report,
    /// Both baselines, the federated run and the report.
    Study,
}

fn config(cli: &Cli) -> harness::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("output_dir={}", o.display()));
    }
    if let Some(t) = &cli.transport {
        overrides.push(format!("fed.transport={t}"));
    }
    Ok(load_config(cli.config.as_deref(), &overrides)?)
}

fn mean(records: &[MetricsRecord], model: &str, task: &str) -> f64 {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.model == model && r.task == task)
        .map(|r| r.dice)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn print_means(records: &[MetricsRecord]) {
    let mut seen = Vec::new();
    for r in records {
        if !seen.contains(&(&r.model, &r.task)) {
            seen.push((&r.model, &r.task));
            println!("{} {}: mean dice {:.4}", r.model, r.task, mean(records, &r.model, &r.task));
        }
    }
}

fn arm_dir(out: &Path, model: &str) -> PathBuf {
    out.join(model)
}

fn run(cli: Cli) -> harness::Result<()> {
    let cfg = config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::GenData => {
            let data = harness::generate_data(&cfg)?;
            let dir = cfg.data.cache_dir.clone().unwrap_or_else(|| out.join("data"));
            export_dataset(&data, &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::RunBaseline { task } => {
            let data = prepare_data(&cfg)?;
            let arm = harness::run_baseline(&cfg, &data, task)?;
            let name = harness::baseline_model_name(task);
            save_arm(&arm, &name, &arm_dir(&out, &name))?;
            print_means(&arm.records);
        }
        Command::RunSegviz => {
            let data = prepare_data(&cfg)?;
            let arm = harness::run_segviz(&cfg, &data)?;
            save_arm(&arm, SEGVIZ_MODEL, &arm_dir(&out, SEGVIZ_MODEL))?;
            print_means(&arm.records);
        }
        Command::Serve { listen } => {
            let listener = TcpListener::bind(listen).map_err(|e| FedError::Transport {
                node: "server".into(),
                detail: format!("bind {listen}: {e}"),
            })?;
            eprintln!("listening on {listen}");
            let fed = cfg.federation();
            let clients = accept_clients(&listener, &fed.nodes, HELLO_TIMEOUT)?;
            let global = serve(clients, &fed, &cfg.model)?;
            let data = harness::generate_data(&cfg)?;
            let mut records = Vec::new();
            for task in fed.tasks() {
                let dice = evaluate_model(&global, &cfg.model, &data.test, &task, cfg.train.trainer.threshold)?;
                records.extend(data.test.iter().zip(dice).map(|(s, d)| MetricsRecord {
                    experiment: cfg.experiment.clone(),
                    model: SEGVIZ_MODEL.into(),
                    task: task.clone(),
                    sample_id: s.sample_id,
                    dice: d,
                }));
            }
            let arm = ArmResult {
                records,
                snapshot: global,
                log: Vec::new(),
            };
            save_arm(&arm, SEGVIZ_MODEL, &arm_dir(&out, SEGVIZ_MODEL))?;
            print_means(&arm.records);
        }
        Command::Client { connect, node_id } => {
            let fed = cfg.federation();
            let idx = fed
                .nodes
                .iter()
                .position(|n| n.node_id == *node_id)
                .ok_or_else(|| FedError::InvalidConfig(format!("node id {node_id} is not configured")))?;
            let node = fed.nodes[idx].clone();
            let class = class_for_task(&node.task).ok_or_else(|| HarnessError::UnknownTask(node.task.clone()))?;
            let ds = generate_node_dataset(
                &cfg.data.phantom,
                &node.task,
                class,
                cfg.node_ids(idx),
                cfg.data.train_fraction,
            )?;
            let mut trainer = client_trainer(&node, &fed, &cfg.model, &cfg.train.trainer)?;
            let mut conn = connect_tcp(connect.as_str(), &node)?;
            let log = run_client(&mut conn, &mut trainer, &node, &ds, &fed)?;
            for r in &log {
                eprintln!("round {} {}: val dice {:.4}", r.round, r.task, r.val_dice);
            }
            let dir = out.join(format!("client_{node_id}"));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("rounds.csv"), round_log_csv(&log))?;
        }
        Command::Eval { snapshot, task } => {
            let snap = load_snapshot(snapshot)?;
            let data = prepare_data(&cfg)?;
            let tasks: Vec<String> = match task {
                Some(t) => vec![t.clone()],
                None => snap.tasks().into_iter().map(String::from).collect(),
            };
            let mut records = Vec::new();
            for t in &tasks {
                let dice = evaluate_model(&snap, &cfg.model, &data.test, t, cfg.train.trainer.threshold)?;
                records.extend(data.test.iter().zip(dice).map(|(s, d)| MetricsRecord {
                    experiment: cfg.experiment.clone(),
                    model: "eval".into(),
                    task: t.clone(),
                    sample_id: s.sample_id,
                    dice: d,
                }));
            }
            print!("{}", to_csv(&records));
        }
        Command::Report => {
            let mut records = Vec::new();
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&out)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(METRICS_FILE).is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                records.extend(parse_csv(&std::fs::read_to_string(d.join(METRICS_FILE))?)?);
            }
            for f in emit_report(&records, &out.join("report"))? {
                println!("wrote {}", f.display());
            }
        }
        Command::Study => {
            let data = prepare_data(&cfg)?;
            let study = harness::run_study(&cfg, &data)?;
            for (b, n) in study.baselines.iter().zip(&cfg.data.nodes) {
                let name = harness::baseline_model_name(&n.task);
                save_arm(b, &name, &arm_dir(&out, &name))?;
            }
            save_arm(&study.segviz, SEGVIZ_MODEL, &arm_dir(&out, SEGVIZ_MODEL))?;
            let records = study.records();
            emit_report(&records, &out.join("report"))?;
            print_means(&records);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.transport.as_deref() == Some("tcp") && !matches!(cli.command, Command::RunSegviz | Command::Study) {
        eprintln!("note: --transport only affects in-process federation runs");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
