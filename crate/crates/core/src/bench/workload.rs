//! Eigenbench scripts: per-client transactions over hot, mild and cold
//! arrays of reference cells.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::config::{BenchConfig, ConfigError};
use crate::ids::ObjectId;
use crate::versioning::{Bound, Suprema};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Shared(ObjectId),
    /// Index into the client's cold array.
    Cold(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptOp {
    pub target: Target,
    /// `Some(v)` writes `v`; `None` reads.
    pub write: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnScript {
    pub ops: Vec<ScriptOp>,
    /// Exact counts of reads and writes per shared object.
    pub suprema: BTreeMap<ObjectId, Suprema>,
    /// Abort after the last operation instead of committing.
    pub abort: bool,
}

impl TxnScript {
    pub fn shared_ops(&self) -> usize {
        self.ops.iter().filter(|o| matches!(o.target, Target::Shared(_))).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientScript {
    /// Client ids start at 1.
    pub client: u32,
    /// Node the client runs next to; its mild array lives there.
    pub node: usize,
    pub txns: Vec<TxnScript>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    /// `(home node, id)` of every hot object.
    pub hot: Vec<(usize, ObjectId)>,
    pub mild: Vec<(usize, ObjectId)>,
    pub clients: Vec<ClientScript>,
}

pub fn hot_id(node: usize, i: usize) -> ObjectId {
    ObjectId::new(format!("hot-{node}-{i}"))
}

pub fn mild_id(client: u32, i: usize) -> ObjectId {
    ObjectId::new(format!("mild-{client}-{i}"))
}

/// Picks an index: with probability `locality` one of the recently used
/// ones, otherwise uniformly from `0..n`.
fn pick(rng: &mut ChaCha8Rng, n: usize, recent: &mut VecDeque<usize>, locality: f64, history: usize) -> usize {
    let i = if !recent.is_empty() && rng.random_bool(locality) {
        recent[rng.random_range(0..recent.len())]
    } else {
        rng.random_range(0..n)
    };
    if history > 0 {
        recent.push_back(i);
        while recent.len() > history {
            recent.pop_front();
        }
    }
    i
}

fn client_rng(seed: u64, client: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Deterministic for a fixed config.
pub fn generate(config: &BenchConfig) -> Result<Workload, ConfigError> {
    config.validate()?;
    let hot: Vec<(usize, ObjectId)> = (0..config.nodes)
        .flat_map(|n| (0..config.hot_array_size).map(move |i| (n, hot_id(n, i))))
        .collect();
    let mut mild = Vec::new();
    let mut clients = Vec::new();
    let may_abort = config.algorithm.supports_manual_abort();
    for c in 0..config.clients {
        let client = c as u32 + 1;
        let node = c % config.nodes;
        let mine: Vec<ObjectId> = (0..config.mild_array_size).map(|i| mild_id(client, i)).collect();
        mild.extend(mine.iter().map(|id| (node, id.clone())));
        let mut rng = client_rng(config.seed, client);
        let mut txns = Vec::with_capacity(config.txns_per_client);
        for t in 0..config.txns_per_client {
            #[derive(Clone, Copy)]
            enum Slot {
                Hot,
                Mild,
                Cold,
            }
            let mut slots: Vec<Slot> = std::iter::repeat_n(Slot::Hot, config.ops_hot)
                .chain(std::iter::repeat_n(Slot::Mild, config.ops_mild))
                .chain(std::iter::repeat_n(Slot::Cold, config.cold_ops()))
                .collect();
            slots.shuffle(&mut rng);
            let (mut rh, mut rm, mut rc) = (VecDeque::new(), VecDeque::new(), VecDeque::new());
            let mut ops = Vec::with_capacity(slots.len());
            for (k, slot) in slots.into_iter().enumerate() {
                let (loc, hist) = (config.locality_probability, config.history_length);
                let target = match slot {
                    Slot::Hot => Target::Shared(hot[pick(&mut rng, hot.len(), &mut rh, loc, hist)].1.clone()),
                    Slot::Mild => Target::Shared(mine[pick(&mut rng, mine.len(), &mut rm, loc, hist)].clone()),
                    Slot::Cold => Target::Cold(pick(&mut rng, config.cold_array_size, &mut rc, loc, hist)),
                };
                let write = (!rng.random_bool(config.read_ratio))
                    .then(|| client as i64 * 1_000_000 + t as i64 * 1_000 + k as i64);
                ops.push(ScriptOp { target, write });
            }
            let abort = may_abort && config.abort_probability > 0.0 && rng.random_bool(config.abort_probability);
            txns.push(TxnScript {
                suprema: exact_suprema(&ops),
                ops,
                abort,
            });
        }
        clients.push(ClientScript { client, node, txns });
    }
    Ok(Workload { hot, mild, clients })
}

fn exact_suprema(ops: &[ScriptOp]) -> BTreeMap<ObjectId, Suprema> {
    let mut out: BTreeMap<ObjectId, Suprema> = BTreeMap::new();
    for op in ops {
        let Target::Shared(id) = &op.target else { continue };
        let s = out.entry(id.clone()).or_insert_with(|| Suprema::new(0, 0, 0));
        let slot = if op.write.is_some() {
            &mut s.max_writes
        } else {
            &mut s.max_reads
        };
        *slot = slot.plus(Bound::Finite(1));
    }
    out
}
