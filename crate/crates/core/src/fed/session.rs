use std::net::TcpListener;

use crate::nn::{Model, ModelConfig, ParamSnapshot, Scope};
use crate::synthdata::{class_for_task, NodeDataset};

use super::train::{client_local_train, trainer_rng, LocalTrainer, TrainConfig};
use super::transport::{accept_clients, connect_tcp, hello, inproc_pair, register, Connection, HELLO_TIMEOUT};
use super::{
    server_aggregate, server_broadcast, ClientUpdate, FedError, FederationConfig, Message, NodeSpec, Result,
    TransportKind,
};

/// One node's record for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    pub node_id: u16,
    pub task: String,
    /// Mean batch loss of each local epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean dice of the received global model on the node's validation split.
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub global: ParamSnapshot,
    pub log: Vec<RoundLog>,
}

fn named(node: u16, e: FedError) -> FedError {
    match e {
        FedError::Transport { detail, .. } => FedError::Transport {
            node: format!("node {node}"),
            detail,
        },
        other => other,
    }
}

/// Server side of a federation over already-registered connections: sends
/// the initial global model, then for each round collects one update per
/// node, aggregates and broadcasts. Returns the final global snapshot.
pub fn serve(
    mut clients: Vec<(NodeSpec, Box<dyn Connection>)>,
    config: &FederationConfig,
    model_config: &ModelConfig,
) -> Result<ParamSnapshot> {
    config.validate()?;
    clients.sort_by_key(|(n, _)| n.node_id);
    let nodes: Vec<NodeSpec> = clients.iter().map(|(n, _)| n.clone()).collect();
    let mut global = Model::<f32>::build(&model_config.with_tasks(&config.tasks()), config.seed)?.extract_snapshot();
    for (node, conn) in clients.iter_mut() {
        let snapshot = server_broadcast(&global, node)?;
        conn.send(&Message::GlobalParams { round: 0, snapshot })
            .map_err(|e| named(node.node_id, e))?;
    }
    for round in 1..=config.rounds {
        let mut updates = Vec::with_capacity(clients.len());
        for (node, conn) in clients.iter_mut() {
            match conn.recv().map_err(|e| named(node.node_id, e))? {
                Message::ClientUpdate {
                    round: r,
                    node_id,
                    sample_count,
                    snapshot,
                } => {
                    if node_id != node.node_id {
                        return Err(FedError::Protocol(format!(
                            "connection of node {} sent an update as node {node_id}",
                            node.node_id
                        )));
                    }
                    if r != round {
                        return Err(FedError::RoundMismatch {
                            node_id,
                            expected: round,
                            got: r,
                        });
                    }
                    updates.push(ClientUpdate {
                        round: r,
                        node_id,
                        task: node.task.clone(),
                        sample_count,
                        snapshot,
                    });
                }
                other => {
                    return Err(FedError::Protocol(format!(
                        "node {} sent {} in round {round}",
                        node.node_id,
                        other.kind()
                    )))
                }
            }
        }
        global = server_aggregate(&updates, &nodes, round, &config.policy)?;
        for (node, conn) in clients.iter_mut() {
            let snapshot = server_broadcast(&global, node)?;
            conn.send(&Message::GlobalParams { round, snapshot })
                .map_err(|e| named(node.node_id, e))?;
        }
    }
    for (node, conn) in clients.iter_mut() {
        conn.send(&Message::Shutdown { round: config.rounds })
            .map_err(|e| named(node.node_id, e))?;
    }
    Ok(global)
}

fn expect_global(conn: &mut dyn Connection, node: &NodeSpec, round: u32) -> Result<ParamSnapshot> {
    match conn.recv()? {
        Message::GlobalParams { round: r, snapshot } if r == round => Ok(snapshot),
        Message::Shutdown { .. } if round == 0 => Err(FedError::Rejected(node.node_id)),
        other => Err(FedError::Protocol(format!(
            "node {} expected GlobalParams for round {round}, got {} for round {}",
            node.node_id,
            other.kind(),
            other.round()
        ))),
    }
}

/// Client side: receives the initial model, then trains, uploads and
/// applies the broadcast for every round. The Hello must already be sent.
pub fn run_client(
    conn: &mut dyn Connection,
    trainer: &mut LocalTrainer,
    node: &NodeSpec,
    dataset: &NodeDataset,
    config: &FederationConfig,
) -> Result<Vec<RoundLog>> {
    let init = expect_global(conn, node, 0)?;
    trainer.model_mut().apply_snapshot(&init, &Scope::All)?;
    let mut log = Vec::with_capacity(config.rounds as usize);
    for round in 1..=config.rounds {
        let (update, epoch_losses) = client_local_train(trainer, dataset, node, config.local_epochs, round)?;
        conn.send(&Message::ClientUpdate {
            round,
            node_id: node.node_id,
            sample_count: node.sample_count,
            snapshot: update.snapshot,
        })?;
        let global = expect_global(conn, node, round)?;
        trainer
            .model_mut()
            .apply_snapshot_filtered(&global, &Scope::All, config.policy.aggregate_running_stats)?;
        let dice = trainer.evaluate(&dataset.validation)?;
        let val_dice = if dice.is_empty() {
            f64::NAN
        } else {
            dice.iter().sum::<f64>() / dice.len() as f64
        };
        log.push(RoundLog {
            round,
            node_id: node.node_id,
            task: node.task.clone(),
            epoch_losses,
            val_dice,
        });
    }
    match conn.recv()? {
        Message::Shutdown { .. } => Ok(log),
        other => Err(FedError::Protocol(format!(
            "node {} expected Shutdown, got {}",
            node.node_id,
            other.kind()
        ))),
    }
}

/// Client trainer for `node`: single-head model, node-specific sampling
/// stream, annealed over the whole federation.
pub fn client_trainer(
    node: &NodeSpec,
    config: &FederationConfig,
    model_config: &ModelConfig,
    train: &TrainConfig,
) -> Result<LocalTrainer> {
    let class_id = class_for_task(&node.task).ok_or_else(|| FedError::UnknownTask(node.task.clone()))?;
    let model = Model::<f32>::build(&model_config.with_tasks(&[&node.task]), config.seed)?;
    LocalTrainer::new(
        model,
        &node.task,
        class_id,
        train.clone(),
        config.total_local_epochs(),
        trainer_rng(config.seed, node.node_id),
    )
}

fn dataset_for<'a>(datasets: &'a [NodeDataset], node: &NodeSpec) -> Result<&'a NodeDataset> {
    datasets
        .iter()
        .find(|d| d.task == node.task)
        .ok_or_else(|| FedError::InvalidConfig(format!("no dataset for node {} ({})", node.node_id, node.task)))
}

/// Runs a whole federation in this process: the server on the calling
/// thread, one worker thread per client, connected in memory or over TCP
/// loopback.
pub fn run_federation(
    config: &FederationConfig,
    model_config: &ModelConfig,
    train: &TrainConfig,
    datasets: &[NodeDataset],
) -> Result<FederationOutcome> {
    config.validate()?;
    let mut jobs = Vec::new();
    for node in &config.nodes {
        let ds = dataset_for(datasets, node)?;
        jobs.push((node.clone(), ds, client_trainer(node, config, model_config, train)?));
    }

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let server_result = match config.transport {
            TransportKind::Inproc => {
                let mut server_side: Vec<Box<dyn Connection>> = Vec::new();
                for (node, ds, mut trainer) in jobs {
                    let (mut client, server) = inproc_pair(&format!("node {}", node.node_id));
                    server_side.push(Box::new(server));
                    handles.push(scope.spawn(move || {
                        client.send(&hello(&node))?;
                        run_client(&mut client, &mut trainer, &node, ds, config)
                    }));
                }
                let mut registered: Vec<(NodeSpec, Box<dyn Connection>)> = Vec::new();
                let mut failure = None;
                for mut conn in server_side {
                    let specs: Vec<NodeSpec> = registered.iter().map(|(n, _)| n.clone()).collect();
                    match conn.recv().map(|m| register(m, &config.nodes, &specs)) {
                        Ok(Ok(spec)) => registered.push((spec, conn)),
                        Ok(Err((_, why))) => {
                            let _ = conn.send(&Message::Shutdown { round: 0 });
                            failure = Some(FedError::Protocol(why));
                        }
                        Err(e) => failure = Some(e),
                    }
                }
                match failure {
                    Some(e) => Err(e),
                    None => serve(registered, config, model_config),
                }
            }
            TransportKind::Tcp => {
                let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| FedError::Transport {
                    node: "server".into(),
                    detail: e.to_string(),
                });
                match listener.and_then(|l| l.local_addr().map(|a| (l, a)).map_err(|e| FedError::Transport {
                    node: "server".into(),
                    detail: e.to_string(),
                })) {
                    Err(e) => Err(e),
                    Ok((listener, addr)) => {
                        for (node, ds, mut trainer) in jobs {
                            handles.push(scope.spawn(move || {
                                let mut conn = connect_tcp(addr, &node)?;
                                run_client(&mut conn, &mut trainer, &node, ds, config)
                            }));
                        }
                        accept_clients(&listener, &config.nodes, HELLO_TIMEOUT)
                            .and_then(|clients| serve(clients, config, model_config))
                    }
                }
            }
        };

        let mut log = Vec::new();
        let mut client_failure = None;
        for h in handles {
            match h.join().expect("client worker panicked") {
                Ok(l) => log.extend(l),
                Err(e) => {
                    // keep the root cause rather than the hang-up it provoked
                    if client_failure.as_ref().map_or(true, |c: &FedError| c.is_transport()) {
                        client_failure = Some(e);
                    }
                }
            }
        }
        match (server_result, client_failure) {
            (Ok(global), None) => {
                log.sort_by_key(|r| (r.round, r.node_id));
                Ok(FederationOutcome { global, log })
            }
            (Err(s), Some(c)) => Err(if c.is_transport() { s } else { c }),
            (Err(s), None) => Err(s),
            (Ok(_), Some(c)) => Err(c),
        }
    })
}
