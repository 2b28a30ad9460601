//! Seeded synthetic knowledge base with edit requests and multi-hop chains.
//!
//! Entities are split into equally sized clusters; every fact stays inside
//! its cluster, so clusters are disconnected in the graph. Objects are drawn
//! with a heavy-tailed preference for a few hub entities per cluster, which
//! gives many subjects sharing `(relation, object)` pairs for neighborhood
//! prompts.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::metrics::{Chain, KnowledgeBase};
use crate::model::{PARAPHRASE_SUFFIX, PORTABILITY_SUFFIX};
use crate::request::{EditRequest, Prompt, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub entities: usize,
    pub clusters: usize,
    pub relations: usize,
    pub facts_per_entity: usize,
    pub requests: usize,
    pub max_neighbors: usize,
    /// Exponent of the rank-based hub preference when drawing objects.
    pub hub_exponent: f64,
    pub chain_hops: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            entities: 200,
            clusters: 8,
            relations: 8,
            facts_per_entity: 2,
            requests: 50,
            max_neighbors: 3,
            hub_exponent: 1.5,
            chain_hops: vec![2, 3, 4],
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub triples: Vec<Triple>,
    pub requests: Vec<EditRequest>,
    pub chains: Vec<Chain>,
}

pub fn entity_name(i: usize) -> String {
    format!("e{i:03}")
}

pub fn relation_name(i: usize) -> String {
    format!("r{i}")
}

pub fn paraphrase_of(relation: &str) -> String {
    format!("{relation}{PARAPHRASE_SUFFIX}")
}

pub fn portability_of(relation: &str) -> String {
    format!("{relation}{PORTABILITY_SUFFIX}")
}

pub fn generate(config: &BenchConfig) -> Result<Benchmark> {
    let BenchConfig { entities, clusters, relations, facts_per_entity, .. } = *config;
    if clusters == 0 || entities % clusters != 0 || entities / clusters < 3 {
        return Err(Error::Config("entities must split into clusters of at least 3".into()));
    }
    if facts_per_entity == 0 || facts_per_entity > relations {
        return Err(Error::Config("facts_per_entity must lie in 1..=relations".into()));
    }
    if config.requests > entities {
        return Err(Error::Config("at most one request per entity".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = entities / clusters;

    // per-cluster hub weights over a random ranking of members
    let mut weights = vec![0.0; entities];
    for k in 0..clusters {
        let mut members: Vec<usize> = (k * size..(k + 1) * size).collect();
        members.shuffle(&mut rng);
        for (rank, &e) in members.iter().enumerate() {
            weights[e] = 1.0 / ((rank + 1) as f64).powf(config.hub_exponent);
        }
    }
    let draw = |rng: &mut ChaCha8Rng, cluster: usize, exclude: &[usize]| -> usize {
        let pool: Vec<usize> = (cluster * size..(cluster + 1) * size).filter(|e| !exclude.contains(e)).collect();
        let total: f64 = pool.iter().map(|&e| weights[e]).sum();
        let mut x = rng.random::<f64>() * total;
        for &e in &pool {
            x -= weights[e];
            if x <= 0.0 {
                return e;
            }
        }
        *pool.last().expect("non-empty pool")
    };

    let mut triples = Vec::with_capacity(entities * facts_per_entity);
    let mut facts: Vec<Vec<(usize, usize)>> = vec![Vec::new(); entities];
    for s in 0..entities {
        let mut rels: Vec<usize> = (0..relations).collect();
        rels.shuffle(&mut rng);
        rels.truncate(facts_per_entity);
        rels.sort_unstable();
        for r in rels {
            let o = draw(&mut rng, s / size, &[s]);
            facts[s].push((r, o));
            triples.push(Triple::new(entity_name(s), relation_name(r), entity_name(o))?);
        }
    }

    let mut subjects: Vec<usize> = (0..entities).collect();
    subjects.shuffle(&mut rng);
    subjects.truncate(config.requests);
    // new targets are entities that already answer some fact in the cluster
    let mut answers: Vec<usize> = facts.iter().flatten().map(|&(_, o)| o).collect();
    answers.sort_unstable();
    answers.dedup();
    let mut chosen = Vec::new();
    for &s in &subjects {
        let &(r, o) = facts[s].choose(&mut rng).expect("facts per entity");
        let cluster = s / size;
        let in_cluster = |e: &usize| e / size == cluster && *e != o && *e != s;
        let mut pool: Vec<usize> = answers.iter().copied().filter(in_cluster).collect();
        if pool.is_empty() {
            pool = (cluster * size..(cluster + 1) * size).filter(in_cluster).collect();
        }
        let new = *pool.choose(&mut rng).expect("cluster of at least 3");
        chosen.push((s, r, o, new));
    }
    let edited: HashSet<(usize, usize)> = chosen.iter().map(|&(s, r, _, _)| (s, r)).collect();

    let mut requests = Vec::new();
    for (i, &(s, r, o, new)) in chosen.iter().enumerate() {
        let mut neighbors: Vec<usize> = (0..entities)
            .filter(|&s2| s2 != s && !edited.contains(&(s2, r)) && facts[s2].contains(&(r, o)))
            .collect();
        neighbors.shuffle(&mut rng);
        neighbors.truncate(config.max_neighbors);
        neighbors.sort_unstable();
        let rel = relation_name(r);
        let subj = entity_name(s);
        requests.push(EditRequest {
            case_id: i as u64,
            subject: subj.clone(),
            relation: rel.clone(),
            target_new: Target::new(entity_name(new)),
            target_true: Target::new(entity_name(o)),
            rewrite_prompts: vec![Prompt::new(subj.clone(), rel.clone())],
            paraphrase_prompts: vec![Prompt::new(subj.clone(), paraphrase_of(&rel))],
            neighborhood_prompts: neighbors.iter().map(|&n| Prompt::new(entity_name(n), rel.clone())).collect(),
            portability_prompts: vec![Prompt::new(subj, portability_of(&rel))],
        });
    }

    // chains start at an edited fact and then follow the edited knowledge base
    let kb = KnowledgeBase::with_edits(&triples, &requests);
    let mut chains = Vec::new();
    for req in &requests {
        for &hops in &config.chain_hops {
            let mut rels = vec![req.relation.clone()];
            let mut cur = req.target_new.token.clone();
            for _ in 1..hops {
                let idx: usize = cur[1..].parse().expect("generated entity name");
                let &(r, _) = facts[idx].choose(&mut rng).expect("facts per entity");
                let rel = relation_name(r);
                cur = kb.get(&cur, &rel).expect("fact exists").to_owned();
                rels.push(rel);
            }
            chains.push(Chain { case_id: req.case_id, subject: req.subject.clone(), relations: rels });
        }
    }
    Ok(Benchmark { triples, requests, chains })
}

pub fn read_chains_jsonl(text: &str) -> Result<Vec<Chain>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn write_chains_jsonl(chains: &[Chain]) -> Result<String> {
    let mut out = String::new();
    for c in chains {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_seeded_graph, GraphConfig};

    #[test]
    fn default_shape() {
        let b = generate(&BenchConfig::default()).unwrap();
        assert_eq!(b.triples.len(), 400);
        assert_eq!(b.requests.len(), 50);
        assert_eq!(b.chains.len(), 150);
        let subjects: HashSet<_> = b.requests.iter().map(|r| &r.subject).collect();
        assert_eq!(subjects.len(), 50);
        for r in &b.requests {
            r.validate().unwrap();
        }
        let kb = KnowledgeBase::with_edits(&b.triples, &b.requests);
        for c in &b.chains {
            kb.follow(c).unwrap();
        }
        assert_eq!(generate(&BenchConfig::default()).unwrap(), b);
    }

    #[test]
    fn clusters_are_disconnected() {
        let b = generate(&BenchConfig::default()).unwrap();
        let g = build_seeded_graph(&b.triples, 8, 1, GraphConfig::default()).unwrap();
        let comps = g.components();
        for e in &g.edges {
            let s: usize = g.nodes[e.source].name[1..].parse().unwrap();
            let t: usize = g.nodes[e.target].name[1..].parse().unwrap();
            assert_eq!(s / 25, t / 25);
        }
        let distinct: HashSet<_> = comps.iter().collect();
        assert!(distinct.len() >= 8);
    }
}
