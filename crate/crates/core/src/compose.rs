//! Merging chain-shaped dataflow graphs into one multi-dataflow.
//!
//! Each graph is viewed as a main chain (source to sink through the `in` /
//! `out` ports) with parameter stores hanging off the other input ports.
//! Graphs are aligned on their longest common prefix and suffix of main
//! actors; the differing middles become branches between a switch and a
//! select. Shared main actors whose stores differ keep one copy of each
//! distinct store behind a select of their own. Actors are only shared when
//! their kinds and every stored code are identical.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::Shape;
use crate::quant::FixedPointFormat;
use crate::sim::{run_image, Actor, ActorKind, DataflowGraph, GraphBuilder, SimError, DEFAULT_FIFO_CAPACITY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("nothing to merge")]
    EmptyInput,
    #[error("graphs have different interfaces: {0}")]
    IncompatibleInterfaces(String),
    #[error("graph '{0}' is not a chain")]
    NotAChain(String),
    #[error("unknown configuration {0}")]
    UnknownConfig(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One main-chain actor with the stores attached to its parameter ports.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLink {
    pub actor: Actor,
    pub sides: Vec<(String, Actor)>,
}

impl ChainLink {
    /// Equality of kinds (including stored codes), ignoring names.
    pub fn same_as(&self, other: &ChainLink) -> bool {
        self.actor.kind == other.actor.kind
            && self.sides.len() == other.sides.len()
            && self
                .sides
                .iter()
                .zip(&other.sides)
                .all(|((p, a), (q, b))| p == q && a.kind == b.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub name: String,
    pub capacity: usize,
    pub links: Vec<ChainLink>,
}

impl Chain {
    pub fn from_graph(g: &DataflowGraph) -> Result<Chain, ComposeError> {
        let not_chain = || ComposeError::NotAChain(g.name.clone());
        g.validate().map_err(|_| not_chain())?;
        let mut used = vec![false; g.actors.len()];
        let mut links = Vec::new();
        let mut cur = g.source();
        loop {
            used[cur] = true;
            let actor = &g.actors[cur];
            let mut sides = Vec::new();
            for port in actor.kind.input_ports().iter().filter(|p| **p != "in") {
                let ch = g
                    .channels
                    .iter()
                    .find(|c| c.dst == cur && c.dst_port == *port)
                    .ok_or_else(not_chain)?;
                let store = &g.actors[ch.src];
                if !store.kind.input_ports().is_empty() || used[ch.src] {
                    return Err(not_chain());
                }
                used[ch.src] = true;
                sides.push((port.to_string(), store.clone()));
            }
            links.push(ChainLink {
                actor: actor.clone(),
                sides,
            });
            if matches!(actor.kind, ActorKind::Sink { .. }) {
                break;
            }
            let next = g
                .channels
                .iter()
                .find(|c| c.src == cur && c.src_port == "out")
                .filter(|c| c.dst_port == "in")
                .ok_or_else(not_chain)?
                .dst;
            if used[next] {
                return Err(not_chain());
            }
            cur = next;
        }
        if used.iter().any(|u| !u) {
            return Err(not_chain());
        }
        Ok(Chain {
            name: g.name.clone(),
            capacity: g.channels.first().map_or(DEFAULT_FIFO_CAPACITY, |c| c.capacity),
            links,
        })
    }

    pub fn to_graph(&self) -> Result<DataflowGraph, SimError> {
        let mut b = GraphBuilder::new(&self.name, self.capacity);
        let mut prev: Option<usize> = None;
        for link in &self.links {
            let stores: Vec<(usize, &str)> = link
                .sides
                .iter()
                .map(|(port, store)| (b.actor(store.name.clone(), store.kind.clone()), port.as_str()))
                .collect();
            let a = b.actor(link.actor.name.clone(), link.actor.kind.clone());
            if let Some(p) = prev {
                b.connect(p, "out", a, "in");
            }
            for (s, port) in stores {
                b.connect(s, "out", a, port);
            }
            prev = Some(a);
        }
        b.finish()
    }

    /// Same sequence of actor kinds and stores, ignoring names.
    pub fn same_structure(&self, other: &Chain) -> bool {
        self.links.len() == other.links.len() && self.links.iter().zip(&other.links).all(|(a, b)| a.same_as(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteKind {
    /// One input, `branches` outputs (`out0`, `out1`, ...).
    Switch,
    /// `branches` inputs (`in0`, `in1`, ...), one output.
    Select,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingActor {
    pub name: String,
    pub kind: RouteKind,
    pub branches: usize,
    pub shape: Shape,
    pub format: FixedPointFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Actor(usize),
    Route(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdChannel {
    pub src: NodeRef,
    pub src_port: String,
    pub dst: NodeRef,
    pub dst_port: String,
    pub format: FixedPointFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDataflow {
    pub name: String,
    pub actors: Vec<Actor>,
    /// Configurations using each actor.
    pub users: Vec<Vec<usize>>,
    pub switches: Vec<RoutingActor>,
    pub channels: Vec<MdChannel>,
    pub config_count: usize,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub id: usize,
    pub source: String,
    pub routes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigTable {
    pub configs: Vec<ConfigEntry>,
}

impl ConfigTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Every routing actor has an in-range entry for every configuration.
    pub fn is_total_for(&self, md: &MultiDataflow) -> bool {
        self.configs.len() == md.config_count
            && self.configs.iter().enumerate().all(|(i, c)| {
                c.id == i
                    && c.routes.len() == md.switches.len()
                    && md
                        .switches
                        .iter()
                        .all(|r| c.routes.get(&r.name).is_some_and(|&b| b < r.branches))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingReport {
    pub shared_actor_count: usize,
    pub duplicated_actor_count: usize,
    pub weight_bits_shared: u64,
}

fn token_shape(kind: &ActorKind) -> Shape {
    kind.output_shape().unwrap_or_else(|| match kind {
        ActorKind::LineBuffer { input, kernel, .. } => Shape::Flat(input.channels() * kernel * kernel),
        ActorKind::WeightStore { weights: t } | ActorKind::BiasStore { bias: t } => Shape::Flat(t.len()),
        _ => Shape::Flat(0),
    })
}

struct MdBuilder {
    md: MultiDataflow,
    names: HashSet<String>,
    routes: Vec<BTreeMap<String, usize>>,
}

impl MdBuilder {
    fn unique(&mut self, base: &str) -> String {
        let mut name = base.to_string();
        let mut n = 1;
        while self.names.contains(&name) {
            name = format!("{base}_{n}");
            n += 1;
        }
        self.names.insert(name.clone());
        name
    }

    fn actor(&mut self, a: &Actor, users: Vec<usize>) -> NodeRef {
        let name = self.unique(&a.name);
        self.md.actors.push(Actor {
            name,
            kind: a.kind.clone(),
        });
        self.md.users.push(users);
        NodeRef::Actor(self.md.actors.len() - 1)
    }

    fn route(&mut self, kind: RouteKind, branches: usize, from: &ActorKind) -> NodeRef {
        let prefix = match kind {
            RouteKind::Switch => "sw",
            RouteKind::Select => "sel",
        };
        let count = self.md.switches.iter().filter(|r| r.kind == kind).count();
        let name = self.unique(&format!("{prefix}{count}"));
        self.md.switches.push(RoutingActor {
            name,
            kind,
            branches,
            shape: token_shape(from),
            format: from.output_format().expect("routed tokens have a format"),
        });
        NodeRef::Route(self.md.switches.len() - 1)
    }

    fn format_of(&self, n: NodeRef) -> FixedPointFormat {
        match n {
            NodeRef::Actor(i) => self.md.actors[i].kind.output_format().expect("producer"),
            NodeRef::Route(i) => self.md.switches[i].format,
        }
    }

    fn connect(&mut self, src: NodeRef, src_port: &str, dst: NodeRef, dst_port: &str) {
        let format = self.format_of(src);
        self.md.channels.push(MdChannel {
            src,
            src_port: src_port.to_string(),
            dst,
            dst_port: dst_port.to_string(),
            format,
        });
    }

    fn set_route(&mut self, route: NodeRef, config: usize, branch: usize) {
        let NodeRef::Route(i) = route else { unreachable!() };
        let name = self.md.switches[i].name.clone();
        self.routes[config].insert(name, branch);
    }

    /// Adds one main actor shared by `configs`; `links[c]` is config c's version.
    fn shared_link(&mut self, links: &[&ChainLink], configs: &[usize], prev: Option<(NodeRef, &str)>) -> NodeRef {
        let first = links[0];
        let mut stores: Vec<(NodeRef, &str)> = Vec::new();
        for (s, (port, _)) in first.sides.iter().enumerate() {
            let mut distinct: Vec<&Actor> = Vec::new();
            let mut choice = Vec::new();
            for l in links {
                let store = &l.sides[s].1;
                let j = match distinct.iter().position(|d| d.kind == store.kind) {
                    Some(j) => j,
                    None => {
                        distinct.push(store);
                        distinct.len() - 1
                    }
                };
                choice.push(j);
            }
            if distinct.len() == 1 {
                let n = self.actor(distinct[0], configs.to_vec());
                stores.push((n, port));
            } else {
                let nodes: Vec<NodeRef> = distinct
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        let users = configs.iter().zip(&choice).filter(|(_, &c)| c == j).map(|(&u, _)| u).collect();
                        self.actor(d, users)
                    })
                    .collect();
                let sel = self.route(RouteKind::Select, distinct.len(), &distinct[0].kind);
                for (j, n) in nodes.into_iter().enumerate() {
                    self.connect(n, "out", sel, &format!("in{j}"));
                }
                for (&cfg, &j) in configs.iter().zip(&choice) {
                    self.set_route(sel, cfg, j);
                }
                stores.push((sel, port));
            }
        }
        let main = self.actor(&first.actor, configs.to_vec());
        if let Some((p, port)) = prev {
            self.connect(p, port, main, "in");
        }
        for (n, port) in stores {
            self.connect(n, "out", main, port);
        }
        main
    }
}

/// Merges chain graphs into a multi-dataflow and its configuration table.
pub fn merge(graphs: &[DataflowGraph]) -> Result<(MultiDataflow, ConfigTable), ComposeError> {
    if graphs.is_empty() {
        return Err(ComposeError::EmptyInput);
    }
    let chains = graphs.iter().map(Chain::from_graph).collect::<Result<Vec<_>, _>>()?;
    let n = chains.len();
    let c0 = &chains[0];
    for c in &chains[1..] {
        let (s0, s1) = (&c0.links[0].actor.kind, &c.links[0].actor.kind);
        let (k0, k1) = (&c0.links.last().unwrap().actor.kind, &c.links.last().unwrap().actor.kind);
        if s0 != s1 {
            return Err(ComposeError::IncompatibleInterfaces(format!(
                "input of '{}' differs from '{}'",
                c.name, c0.name
            )));
        }
        if k0 != k1 {
            return Err(ComposeError::IncompatibleInterfaces(format!(
                "output of '{}' differs from '{}'",
                c.name, c0.name
            )));
        }
    }

    let min_len = chains.iter().map(|c| c.links.len()).min().unwrap();
    let main_eq = |i: usize, j: usize| chains.iter().all(|c| c.links[i].actor.kind == c0.links[j].actor.kind);
    let mut p = 0;
    while p < min_len && main_eq(p, p) {
        p += 1;
    }
    let mut q = 0;
    while q < min_len - p
        && chains
            .iter()
            .all(|c| c.links[c.links.len() - 1 - q].actor.kind == c0.links[c0.links.len() - 1 - q].actor.kind)
    {
        q += 1;
    }

    // group identical middles into branches
    let middles: Vec<&[ChainLink]> = chains.iter().map(|c| &c.links[p..c.links.len() - q]).collect();
    let mut branch_of = Vec::with_capacity(n);
    let mut branches: Vec<(&[ChainLink], Vec<usize>)> = Vec::new();
    for (cfg, m) in middles.iter().enumerate() {
        let same = |b: &[ChainLink]| b.len() == m.len() && b.iter().zip(m.iter()).all(|(x, y)| x.same_as(y));
        match branches.iter().position(|(b, _)| same(b)) {
            Some(i) => {
                branches[i].1.push(cfg);
                branch_of.push(i);
            }
            None => {
                branches.push((m, vec![cfg]));
                branch_of.push(branches.len() - 1);
            }
        }
    }

    let name = chains.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+");
    let mut b = MdBuilder {
        md: MultiDataflow {
            name,
            actors: Vec::new(),
            users: Vec::new(),
            switches: Vec::new(),
            channels: Vec::new(),
            config_count: n,
            capacity: c0.capacity,
        },
        names: HashSet::new(),
        routes: vec![BTreeMap::new(); n],
    };
    let all: Vec<usize> = (0..n).collect();

    let mut prev: Option<NodeRef> = None;
    for i in 0..p {
        let links: Vec<&ChainLink> = chains.iter().map(|c| &c.links[i]).collect();
        let node = b.shared_link(&links, &all, prev.map(|pr| (pr, "out")));
        prev = Some(node);
    }
    let prefix_end = prev.expect("sources are shared");

    if branches.len() > 1 {
        let from = &c0.links[p - 1].actor.kind;
        let sw = b.route(RouteKind::Switch, branches.len(), from);
        b.connect(prefix_end, "out", sw, "in");
        let mut ends = Vec::new();
        for (bi, (middle, configs)) in branches.iter().enumerate() {
            let mut last = (sw, format!("out{bi}"));
            for link in middle.iter() {
                let links = vec![link; configs.len()];
                let node = b.shared_link(&links, configs, Some((last.0, &last.1)));
                last = (node, "out".to_string());
            }
            ends.push(last);
        }
        let before_suffix = &c0.links[c0.links.len() - q - 1].actor.kind;
        let sel = b.route(RouteKind::Select, branches.len(), before_suffix);
        for (bi, (node, port)) in ends.into_iter().enumerate() {
            b.connect(node, &port, sel, &format!("in{bi}"));
        }
        for (cfg, &bi) in branch_of.iter().enumerate() {
            b.set_route(sw, cfg, bi);
            b.set_route(sel, cfg, bi);
        }
        prev = Some(sel);
    }

    for j in (0..q).rev() {
        let links: Vec<&ChainLink> = chains.iter().map(|c| &c.links[c.links.len() - 1 - j]).collect();
        let node = b.shared_link(&links, &all, prev.map(|pr| (pr, "out")));
        prev = Some(node);
    }

    let table = ConfigTable {
        configs: b
            .routes
            .into_iter()
            .enumerate()
            .map(|(id, routes)| ConfigEntry {
                id,
                source: chains[id].name.clone(),
                routes,
            })
            .collect(),
    };
    Ok((b.md, table))
}

impl MultiDataflow {
    /// Total number of non-routing actors.
    pub fn actor_count(&self) -> usize {
        self.actors.len()
    }

    /// The subgraph active under `config`, with each routing actor on the
    /// active path replaced by a one-token pass-through.
    pub fn active_graph(&self, table: &ConfigTable, config: usize) -> Result<DataflowGraph, ComposeError> {
        let entry = table
            .configs
            .get(config)
            .filter(|_| config < self.config_count)
            .ok_or(ComposeError::UnknownConfig(config))?;
        let route_of = |r: usize| entry.routes.get(&self.switches[r].name).copied();
        let active_channel = |c: &MdChannel| {
            let src_ok = match c.src {
                NodeRef::Route(r) if self.switches[r].kind == RouteKind::Switch => {
                    route_of(r).is_some_and(|b| c.src_port == format!("out{b}"))
                }
                _ => true,
            };
            let dst_ok = match c.dst {
                NodeRef::Route(r) if self.switches[r].kind == RouteKind::Select => {
                    route_of(r).is_some_and(|b| c.dst_port == format!("in{b}"))
                }
                _ => true,
            };
            src_ok && dst_ok
        };
        let channels: Vec<&MdChannel> = self.channels.iter().filter(|c| active_channel(c)).collect();

        // component containing the source
        let source = self
            .actors
            .iter()
            .position(|a| matches!(a.kind, ActorKind::Source { .. }))
            .map(NodeRef::Actor)
            .expect("merged graph has a source");
        let mut active: HashSet<NodeRef> = HashSet::from([source]);
        let mut stack = vec![source];
        while let Some(nd) = stack.pop() {
            for c in &channels {
                for (from, to) in [(c.src, c.dst), (c.dst, c.src)] {
                    if from == nd && active.insert(to) {
                        stack.push(to);
                    }
                }
            }
        }

        let mut b = GraphBuilder::new(&entry.source, self.capacity);
        let mut index = BTreeMap::new();
        for (i, a) in self.actors.iter().enumerate() {
            if active.contains(&NodeRef::Actor(i)) {
                index.insert(NodeRef::Actor(i).key(), b.actor(a.name.clone(), a.kind.clone()));
            }
        }
        for (i, r) in self.switches.iter().enumerate() {
            if active.contains(&NodeRef::Route(i)) {
                let kind = ActorKind::Route {
                    shape: r.shape,
                    format: r.format,
                };
                index.insert(NodeRef::Route(i).key(), b.actor(r.name.clone(), kind));
            }
        }
        for c in channels.iter().filter(|c| active.contains(&c.src)) {
            let src_port = if matches!(c.src, NodeRef::Route(_)) { "out" } else { &c.src_port };
            let dst_port = if matches!(c.dst, NodeRef::Route(_)) { "in" } else { &c.dst_port };
            b.connect(index[&c.src.key()], src_port, index[&c.dst.key()], dst_port);
        }
        Ok(b.finish()?)
    }

    pub fn sharing_report(&self) -> SharingReport {
        let threshold = self.config_count.min(2);
        let shared: Vec<usize> = (0..self.actors.len()).filter(|&i| self.users[i].len() >= threshold).collect();
        let duplicated = if self.config_count >= 2 {
            self.users.iter().filter(|u| u.len() == 1).count()
        } else {
            0
        };
        SharingReport {
            shared_actor_count: shared.len(),
            duplicated_actor_count: duplicated,
            weight_bits_shared: shared
                .iter()
                .map(|&i| &self.actors[i].kind)
                .filter(|k| k.is_parameter_store())
                .map(ActorKind::parameter_bits)
                .sum(),
        }
    }
}

impl NodeRef {
    fn key(self) -> (u8, usize) {
        match self {
            NodeRef::Actor(i) => (0, i),
            NodeRef::Route(i) => (1, i),
        }
    }
}

/// Removes pass-through route actors, reconnecting their neighbours.
pub fn strip_routes(g: &DataflowGraph) -> Result<DataflowGraph, SimError> {
    let is_route = |i: usize| matches!(g.actors[i].kind, ActorKind::Route { .. });
    let mut b = GraphBuilder::new(&g.name, g.channels.first().map_or(DEFAULT_FIFO_CAPACITY, |c| c.capacity));
    let mut index = vec![usize::MAX; g.actors.len()];
    for (i, a) in g.actors.iter().enumerate() {
        if !is_route(i) {
            index[i] = b.actor(a.name.clone(), a.kind.clone());
        }
    }
    for c in g.channels.iter().filter(|c| !is_route(c.dst)) {
        let mut src = c.src;
        let mut src_port = c.src_port.as_str();
        while is_route(src) {
            let up = g.channels.iter().find(|u| u.dst == src).expect("route has an input");
            src = up.src;
            src_port = up.src_port.as_str();
        }
        b.connect(index[src], src_port, index[c.dst], &c.dst_port);
    }
    b.finish()
}

/// Runs `image` through configuration `config` of the merged graph.
pub fn execute_config(
    md: &MultiDataflow,
    table: &ConfigTable,
    config: usize,
    image: &[i32],
) -> Result<Vec<i32>, ComposeError> {
    let g = md.active_graph(table, config)?;
    Ok(run_image(&g, image)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{LayerNode, ModelIR};
    use crate::quant::{quantize_model, Datatype, QuantConfig};
    use crate::sim::build_dataflow;

    fn chain(scale: f32) -> DataflowGraph {
        let ir = ModelIR::new(
            "g",
            Shape::Flat(4),
            vec![LayerNode::scale_shift("bn0", vec![scale; 4], vec![0.1; 4])],
        )
        .unwrap();
        let q = quantize_model(&ir, &QuantConfig::new(Datatype::new(16, 8).unwrap()), &[vec![0.5; 4]]).unwrap();
        build_dataflow(&q, 8).unwrap()
    }

    #[test]
    fn identity_merge() {
        let g = chain(0.5);
        let (md, table) = merge(std::slice::from_ref(&g)).unwrap();
        assert!(md.switches.is_empty());
        assert_eq!(table.configs.len(), 1);
        assert_eq!(md.active_graph(&table, 0).unwrap(), g);
        let r = md.sharing_report();
        assert_eq!((r.shared_actor_count, r.duplicated_actor_count), (3, 0));
        assert_eq!(
            md.active_graph(&table, 1).unwrap_err(),
            ComposeError::UnknownConfig(1)
        );
    }

    #[test]
    fn diverging_middle_gets_switch_and_select() {
        let (g1, mut g2) = (chain(0.5), chain(0.25));
        g2.name = "g2".into();
        let (md, table) = merge(&[g1.clone(), g2.clone()]).unwrap();
        let kinds: Vec<RouteKind> = md.switches.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, vec![RouteKind::Switch, RouteKind::Select]);
        assert_eq!(md.actor_count(), 4);
        let r = md.sharing_report();
        assert_eq!((r.shared_actor_count, r.duplicated_actor_count), (2, 2));
        assert!(table.is_total_for(&md));
        assert_eq!(
            table.to_json(),
            r#"{"configs":[{"id":0,"source":"g","routes":{"sel0":0,"sw0":0}},{"id":1,"source":"g2","routes":{"sel0":1,"sw0":1}}]}"#
        );
        for (i, g) in [g1, g2].iter().enumerate() {
            let active = strip_routes(&md.active_graph(&table, i).unwrap()).unwrap();
            assert!(Chain::from_graph(&active).unwrap().same_structure(&Chain::from_graph(g).unwrap()));
            let img = vec![3, -7, 100, 0];
            assert_eq!(execute_config(&md, &table, i, &img).unwrap(), run_image(g, &img).unwrap().0);
        }
    }

    #[test]
    fn mismatched_interfaces_are_rejected() {
        let g1 = chain(0.5);
        let ir = ModelIR::new("h", Shape::Flat(3), vec![]).unwrap();
        let q = quantize_model(&ir, &QuantConfig::new(Datatype::new(16, 8).unwrap()), &[vec![0.5; 3]]).unwrap();
        let g2 = build_dataflow(&q, 8).unwrap();
        assert!(matches!(merge(&[g1, g2]), Err(ComposeError::IncompatibleInterfaces(_))));
        assert_eq!(merge(&[]).unwrap_err(), ComposeError::EmptyInput);
    }
}
