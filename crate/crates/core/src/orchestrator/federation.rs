//! Federation state and the per-round loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fedstyle::{extract_stats, select_partners, StyleMixer, StyleStats};
use crate::fusion::disseminate_with;
use crate::params::FlatParams;
use crate::sim::data::SegSample;
use crate::sim::model::{train_local, ToyModel};
use crate::tree::{build_star, build_tree, similarity_matrix, ClientId, NodeTree};

use super::config::{ExperimentConfig, Topology};
use super::OrchestratorError;

/// RNG stream for one client in one round. Independent of thread scheduling.
pub fn client_rng(seed: u64, client: ClientId, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((client as u64) << 32) | round as u64);
    rng
}

/// Seed for the shared initial model.
pub fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: ClientId,
    pub name: String,
    pub data: Vec<SegSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// `(level, tau, clusters of client ids)`
    pub clusters: Vec<(usize, f64, Vec<Vec<ClientId>>)>,
    /// Cosine similarity of the trained leaves, rows in client id order.
    pub similarity: Vec<Vec<f64>>,
    pub tree_checksum: String,
    pub losses: BTreeMap<ClientId, f64>,
    pub partners: BTreeMap<ClientId, ClientId>,
    /// `(batches offered, batches mixed)` per client.
    pub style_calls: BTreeMap<ClientId, (usize, usize)>,
    pub wall_time_ms: u128,
}

impl RoundLog {
    /// Structured-text record. Wall time is left out so output is reproducible.
    pub fn format(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "round={} tree_checksum={}", self.round, self.tree_checksum);
        for (level, tau, clusters) in &self.clusters {
            let c: Vec<String> = clusters
                .iter()
                .map(|c| c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            let _ = writeln!(
                out,
                "round={} level={level} tau={tau:.6} clusters={}",
                self.round,
                c.join("|")
            );
        }
        for (client, loss) in &self.losses {
            let partner = self
                .partners
                .get(client)
                .map_or_else(|| "-".to_string(), |p| p.to_string());
            let (calls, mixed) = self.style_calls.get(client).copied().unwrap_or_default();
            let _ = writeln!(
                out,
                "round={} client={client} loss={loss:.6} partner={partner} style_calls={calls} style_mixed={mixed}",
                self.round
            );
        }
        for row in &self.similarity {
            let r: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "round={} similarity={}", self.round, r.join(","));
        }
        out
    }
}

/// All mutable state carried across rounds.
#[derive(Debug, Clone)]
pub struct Federation {
    config: ExperimentConfig,
    clients: Vec<Client>,
    params: BTreeMap<ClientId, FlatParams>,
    style_buffers: BTreeMap<ClientId, Vec<StyleStats>>,
    tree: Option<NodeTree>,
    logs: Vec<RoundLog>,
    checkpoint_dir: Option<PathBuf>,
}

impl Federation {
    /// Every client starts from the same seeded model. Style buffers start as
    /// the statistics of each client's data in fixed batch order.
    pub fn new(config: ExperimentConfig, mut clients: Vec<Client>) -> Result<Self, OrchestratorError> {
        config.validate()?;
        if clients.is_empty() {
            return Err(OrchestratorError::NoClients);
        }
        clients.sort_by_key(|c| c.id);
        if clients.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(OrchestratorError::DuplicateClient);
        }
        if let Some(c) = clients.iter().find(|c| c.data.is_empty()) {
            return Err(OrchestratorError::EmptyClient(c.name.clone()));
        }
        let init = ToyModel::init(config.arch(), init_seed(config.seed));
        let mut params = BTreeMap::new();
        let mut style_buffers = BTreeMap::new();
        for c in &clients {
            params.insert(c.id, init.params().clone().with_sample_count(c.data.len() as u64));
            let buffer = c
                .data
                .chunks(config.train.batch_size)
                .map(|chunk| {
                    let imgs: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
                    extract_stats(&imgs)
                })
                .collect::<Result<Vec<_>, _>>()?;
            style_buffers.insert(c.id, buffer);
        }
        Ok(Self {
            config,
            clients,
            params,
            style_buffers,
            tree: None,
            logs: Vec::new(),
            checkpoint_dir: None,
        })
    }

    /// Writes leaf and root parameters after each round under `dir`.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    /// Current (post-dissemination) client parameters.
    pub fn params(&self) -> &BTreeMap<ClientId, FlatParams> {
        &self.params
    }

    /// Tree of the last completed round, with dissemination applied.
    pub fn tree(&self) -> Option<&NodeTree> {
        self.tree.as_ref()
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn rounds_done(&self) -> usize {
        self.logs.len()
    }

    /// Pairing, local training, aggregation and dissemination for one round.
    pub fn run_round(&mut self) -> Result<&RoundLog, OrchestratorError> {
        let started = Instant::now();
        let round = self.logs.len();
        let cfg = &self.config;

        let partners = if cfg.style.enabled && self.clients.len() > 1 {
            select_partners(&self.params)?
        } else {
            BTreeMap::new()
        };
        let mix = cfg.mix_config()?;
        let train_cfg = cfg.train_config();
        let arch = cfg.arch();

        let outcomes: Vec<_> = self
            .clients
            .par_iter()
            .map(|client| {
                let start = ToyModel::from_params(arch, self.params[&client.id].clone())?;
                let mut rng = client_rng(cfg.seed, client.id, round);
                let buffer = partners.get(&client.id).map(|p| self.style_buffers[p].as_slice());
                let mut mixer = buffer.map(|b| StyleMixer::new(b, mix.clone()));
                let out = train_local(&start, &client.data, &train_cfg, mixer.as_mut(), &mut rng);
                let calls = mixer.map_or((0, 0), |m| (m.calls(), m.applied()));
                Ok::<_, OrchestratorError>((client.id, out, calls))
            })
            .collect::<Result<_, _>>()?;

        let mut leaves = Vec::with_capacity(outcomes.len());
        let mut losses = BTreeMap::new();
        let mut style_calls = BTreeMap::new();
        for (id, out, calls) in outcomes {
            losses.insert(id, out.final_loss.unwrap_or(f64::NAN));
            style_calls.insert(id, calls);
            self.style_buffers.insert(id, out.style_buffer);
            leaves.push((id, out.model.into_params()));
        }

        let refs: Vec<&FlatParams> = leaves.iter().map(|(_, p)| p).collect();
        let similarity = similarity_matrix(&refs)?;
        let tree = match cfg.topology {
            Topology::Tree => build_tree(&leaves, &cfg.schedule()?)?,
            Topology::Star => build_star(&leaves, cfg.tree.max_height)?,
        };
        let clusters = tree
            .levels()
            .iter()
            .map(|rec| {
                let groups = rec
                    .clusters
                    .iter()
                    .map(|c| {
                        c.iter()
                            .flat_map(|&n| tree.node(n).source_clients.iter().copied())
                            .collect::<std::collections::BTreeSet<_>>()
                            .into_iter()
                            .collect()
                    })
                    .collect();
                (rec.level, rec.threshold, groups)
            })
            .collect();
        let tree_checksum = tree.checksum();

        let spread = disseminate_with(&tree, &cfg.fusion_config()?, cfg.fusion.mode)?;
        self.params = spread.leaves;
        self.tree = Some(spread.tree);

        if let Some(dir) = &self.checkpoint_dir {
            self.write_checkpoint(dir, round)?;
        }
        let log = RoundLog {
            round,
            clusters,
            similarity,
            tree_checksum,
            losses,
            partners,
            style_calls,
            wall_time_ms: started.elapsed().as_millis(),
        };
        log::info!(
            "round {round} done in {} ms, tree {}",
            log.wall_time_ms,
            log.tree_checksum
        );
        self.logs.push(log);
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Runs `rounds` rounds. Zero rounds leaves the initial state untouched.
    pub fn run(&mut self, rounds: usize) -> Result<(), OrchestratorError> {
        for _ in 0..rounds {
            self.run_round()?;
        }
        Ok(())
    }

    fn write_checkpoint(&self, dir: &Path, round: usize) -> Result<(), OrchestratorError> {
        let sub = dir.join(format!("round_{round:03}"));
        std::fs::create_dir_all(&sub).map_err(|e| OrchestratorError::io(&sub, e))?;
        let write = |name: String, p: &FlatParams| {
            let path = sub.join(name);
            let file = std::fs::File::create(&path).map_err(|e| OrchestratorError::io(&path, e))?;
            p.write_binary(std::io::BufWriter::new(file))
                .map_err(|e| OrchestratorError::io(&path, e))
        };
        for (id, p) in &self.params {
            write(format!("client_{id}.bin"), p)?;
        }
        if let Some(tree) = &self.tree {
            write("root.bin".to_string(), &tree.root().params)?;
        }
        Ok(())
    }
}
