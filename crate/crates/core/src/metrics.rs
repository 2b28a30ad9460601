//! Edit-quality metrics and the per-case report format.
//!
//! Every comparison is strict on NLL: a prompt counts for the new target only
//! if `nll(new) < nll(true)`, and for the original only if `nll(true) < nll(new)`.
//! Ties fail both ways. Rates average over a case's prompts first, then over
//! cases; cases with no prompts of a kind are excluded from that rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::model::ToyModel;
use crate::request::{EditRequest, Prompt, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NllPair {
    pub target_new: f64,
    pub target_true: f64,
}

impl NllPair {
    pub fn new_wins(&self) -> bool {
        self.target_new < self.target_true
    }

    pub fn true_wins(&self) -> bool {
        self.target_true < self.target_new
    }
}

pub fn nll_pairs(model: &ToyModel, prompts: &[Prompt], request: &EditRequest) -> Result<Vec<NllPair>> {
    prompts
        .iter()
        .map(|p| {
            Ok(NllPair {
                target_new: model.nll(p, &request.target_new.token)?,
                target_true: model.nll(p, &request.target_true.token)?,
            })
        })
        .collect()
}

fn fraction(pairs: &[NllPair], hit: impl Fn(&NllPair) -> bool) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().filter(|p| hit(p)).count() as f64 / pairs.len() as f64)
}

/// A rate in `[0, 1]` with the number of cases behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub cases: usize,
    /// Cases that had no prompts of this kind.
    pub excluded: usize,
}

impl Rate {
    pub fn from_cases(per_case: &[Option<f64>]) -> Rate {
        let present: Vec<f64> = per_case.iter().flatten().copied().collect();
        let value = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        Rate { value, cases: present.len(), excluded: per_case.len() - present.len() }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptSet {
    Rewrite,
    Paraphrase,
    Neighborhood,
    Portability,
}

impl PromptSet {
    fn prompts(self, r: &EditRequest) -> &[Prompt] {
        match self {
            PromptSet::Rewrite => &r.rewrite_prompts,
            PromptSet::Paraphrase => &r.paraphrase_prompts,
            PromptSet::Neighborhood => &r.neighborhood_prompts,
            PromptSet::Portability => &r.portability_prompts,
        }
    }
}

/// Per-case rate for one prompt set; the neighborhood set asks for the
/// original answer, all others for the new one.
pub fn case_rate(model: &ToyModel, request: &EditRequest, set: PromptSet) -> Result<Option<f64>> {
    let pairs = nll_pairs(model, set.prompts(request), request)?;
    Ok(match set {
        PromptSet::Neighborhood => fraction(&pairs, NllPair::true_wins),
        _ => fraction(&pairs, NllPair::new_wins),
    })
}

fn rate_over(model: &ToyModel, requests: &[EditRequest], set: PromptSet) -> Result<Rate> {
    let per_case = requests.iter().map(|r| case_rate(model, r, set)).collect::<Result<Vec<_>>>()?;
    Ok(Rate::from_cases(&per_case))
}

pub fn efficacy(model: &ToyModel, requests: &[EditRequest]) -> Result<Rate> {
    rate_over(model, requests, PromptSet::Rewrite)
}

pub fn generalization(model: &ToyModel, requests: &[EditRequest]) -> Result<Rate> {
    rate_over(model, requests, PromptSet::Paraphrase)
}

pub fn specificity(model: &ToyModel, requests: &[EditRequest]) -> Result<Rate> {
    rate_over(model, requests, PromptSet::Neighborhood)
}

pub fn portability(model: &ToyModel, requests: &[EditRequest]) -> Result<Rate> {
    rate_over(model, requests, PromptSet::Portability)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eds {
    pub value: f64,
    /// Set when an input was zero and the harmonic mean is taken as 0.
    pub degenerate: bool,
}

/// Harmonic mean of efficacy, generalization and specificity (percentages).
pub fn eds(eff: f64, gen: f64, spec: f64) -> Result<Eds> {
    for x in [eff, gen, spec] {
        if !(0.0..=100.0).contains(&x) {
            return Err(Error::InvalidArgument(format!("EDS inputs must lie in [0, 100], got {x}")));
        }
    }
    if eff == 0.0 || gen == 0.0 || spec == 0.0 {
        return Ok(Eds { value: 0.0, degenerate: true });
    }
    Ok(Eds { value: 3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spec), degenerate: false })
}

/// Reference row used to show how a reported EDS compares with the harmonic
/// mean of the same row's Eff/Gen/Spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdsDiscrepancy {
    pub eff: f64,
    pub gen: f64,
    pub spec: f64,
    pub reported: f64,
    pub harmonic_mean: f64,
    pub matches: bool,
}

pub fn eds_discrepancy(eff: f64, gen: f64, spec: f64, reported: f64) -> Result<EdsDiscrepancy> {
    let h = eds(eff, gen, spec)?.value;
    Ok(EdsDiscrepancy { eff, gen, spec, reported, harmonic_mean: h, matches: (h - reported).abs() <= 0.01 })
}

/// Published reference row whose reported EDS (92.42) is
/// not the harmonic mean of its Eff/Gen/Spec.
pub fn reference_row_discrepancy() -> EdsDiscrepancy {
    eds_discrepancy(99.43, 98.35, 79.47, 92.42).expect("valid inputs")
}

/// A chain of queries where each answer is the next subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chain {
    pub case_id: u64,
    pub subject: String,
    pub relations: Vec<String>,
}

impl Chain {
    pub fn hops(&self) -> usize {
        self.relations.len()
    }
}

/// `(subject, relation) → object` lookup with edits layered on top.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    facts: HashMap<(String, String), String>,
}

impl KnowledgeBase {
    pub fn new(triples: &[Triple]) -> Self {
        let facts = triples.iter().map(|t| ((t.subject.clone(), t.relation.clone()), t.object.clone())).collect();
        KnowledgeBase { facts }
    }

    pub fn with_edits(triples: &[Triple], requests: &[EditRequest]) -> Self {
        let mut kb = Self::new(triples);
        for r in requests {
            kb.facts.insert((r.subject.clone(), r.relation.clone()), r.target_new.token.clone());
        }
        kb
    }

    pub fn get(&self, subject: &str, relation: &str) -> Option<&str> {
        self.facts.get(&(subject.to_owned(), relation.to_owned())).map(String::as_str)
    }

    /// Final answer of a chain, or an error naming the missing link.
    pub fn follow(&self, chain: &Chain) -> Result<String> {
        let mut cur = chain.subject.clone();
        for r in &chain.relations {
            cur = self.get(&cur, r).ok_or_else(|| Error::unknown("fact", format!("({cur}, {r})")))?.to_owned();
        }
        Ok(cur)
    }
}

/// Whether the model, feeding each top-1 answer into the next hop, lands on
/// the knowledge base's final answer.
pub fn chain_success(model: &ToyModel, kb: &KnowledgeBase, chain: &Chain) -> Result<bool> {
    let expected = kb.follow(chain)?;
    let mut cur = chain.subject.clone();
    for r in &chain.relations {
        cur = model.top1_entity(&Prompt::new(cur.as_str(), r.as_str()))?;
    }
    Ok(cur == expected)
}

/// Success rate over the chains with exactly `hops` relations.
pub fn multi_hop_efficacy(model: &ToyModel, kb: &KnowledgeBase, chains: &[Chain], hops: usize) -> Result<Rate> {
    let per = chains
        .iter()
        .filter(|c| c.hops() == hops)
        .map(|c| chain_success(model, kb, c).map(|ok| Some(if ok { 1.0 } else { 0.0 })))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rate::from_cases(&per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestedRewrite {
    pub prompt: String,
    pub relation_id: String,
    pub target_new: Target,
    pub target_true: Target,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostProbs {
    pub rewrite_prompts_probs: Vec<NllPair>,
    pub paraphrase_prompts_probs: Vec<NllPair>,
    pub neighborhood_prompts_probs: Vec<NllPair>,
}

/// Per-case record; probability fields hold negative log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseReport {
    pub case_id: u64,
    pub grouped_case_ids: Vec<u64>,
    pub num_edits: u32,
    pub requested_rewrite: RequestedRewrite,
    pub time: f64,
    pub post: PostProbs,
}

pub fn case_report(model: &ToyModel, request: &EditRequest, time: f64) -> Result<CaseReport> {
    Ok(CaseReport {
        case_id: request.case_id,
        grouped_case_ids: vec![request.case_id],
        num_edits: 1,
        requested_rewrite: RequestedRewrite {
            prompt: request.prompt_template(),
            relation_id: request.relation.clone(),
            target_new: request.target_new.clone(),
            target_true: request.target_true.clone(),
            subject: request.subject.clone(),
        },
        time,
        post: PostProbs {
            rewrite_prompts_probs: nll_pairs(model, &request.rewrite_prompts, request)?,
            paraphrase_prompts_probs: nll_pairs(model, &request.paraphrase_prompts, request)?,
            neighborhood_prompts_probs: nll_pairs(model, &request.neighborhood_prompts, request)?,
        },
    })
}

/// Checks a parsed JSON value against the per-case schema: exact key sets,
/// nesting and numeric types.
pub fn validate_case_json(value: &serde_json::Value) -> std::result::Result<(), String> {
    use serde_json::Value;
    fn keys(v: &Value, want: &[&str], at: &str) -> std::result::Result<(), String> {
        let obj = v.as_object().ok_or_else(|| format!("{at}: expected an object"))?;
        let mut have: Vec<&str> = obj.keys().map(String::as_str).collect();
        let mut want = want.to_vec();
        have.sort_unstable();
        want.sort_unstable();
        if have != want {
            return Err(format!("{at}: keys {have:?}, expected {want:?}"));
        }
        Ok(())
    }
    fn target(v: &Value, at: &str) -> std::result::Result<(), String> {
        let obj = v.as_object().ok_or_else(|| format!("{at}: expected an object"))?;
        if !obj.get("str").is_some_and(Value::is_string) {
            return Err(format!("{at}.str: expected a string"));
        }
        for k in obj.keys() {
            match k.as_str() {
                "str" => {}
                "id" if obj[k].is_string() => {}
                _ => return Err(format!("{at}.{k}: unexpected field")),
            }
        }
        Ok(())
    }
    keys(value, &["case_id", "grouped_case_ids", "num_edits", "requested_rewrite", "time", "post"], "case")?;
    if !value["case_id"].is_u64() {
        return Err("case_id: expected an unsigned integer".into());
    }
    let grouped = value["grouped_case_ids"].as_array().ok_or("grouped_case_ids: expected an array")?;
    if !grouped.iter().all(Value::is_u64) {
        return Err("grouped_case_ids: expected unsigned integers".into());
    }
    if !value["num_edits"].is_u64() {
        return Err("num_edits: expected an unsigned integer".into());
    }
    if !value["time"].is_number() {
        return Err("time: expected a number".into());
    }
    let rw = &value["requested_rewrite"];
    keys(rw, &["prompt", "relation_id", "target_new", "target_true", "subject"], "requested_rewrite")?;
    for k in ["prompt", "relation_id", "subject"] {
        if !rw[k].is_string() {
            return Err(format!("requested_rewrite.{k}: expected a string"));
        }
    }
    target(&rw["target_new"], "requested_rewrite.target_new")?;
    target(&rw["target_true"], "requested_rewrite.target_true")?;
    let post = &value["post"];
    let sets = ["rewrite_prompts_probs", "paraphrase_prompts_probs", "neighborhood_prompts_probs"];
    keys(post, &sets, "post")?;
    for s in sets {
        let arr = post[s].as_array().ok_or_else(|| format!("post.{s}: expected an array"))?;
        for (i, e) in arr.iter().enumerate() {
            let at = format!("post.{s}[{i}]");
            keys(e, &["target_new", "target_true"], &at)?;
            if !e["target_new"].is_number() || !e["target_true"].is_number() {
                return Err(format!("{at}: expected numbers"));
            }
        }
    }
    Ok(())
}

/// Rates of one case, for the CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseRates {
    pub case_id: u64,
    pub eff: Option<f64>,
    pub gen: Option<f64>,
    pub spec: Option<f64>,
    pub port: Option<f64>,
}

pub fn case_rates(model: &ToyModel, request: &EditRequest) -> Result<CaseRates> {
    Ok(CaseRates {
        case_id: request.case_id,
        eff: case_rate(model, request, PromptSet::Rewrite)?,
        gen: case_rate(model, request, PromptSet::Paraphrase)?,
        spec: case_rate(model, request, PromptSet::Neighborhood)?,
        port: case_rate(model, request, PromptSet::Portability)?,
    })
}

/// Mean over cases of each case's own EDS, counting only cases with all
/// three rates present.
pub fn per_case_eds_mean(rates: &[CaseRates]) -> Result<Option<f64>> {
    let mut values = Vec::new();
    for r in rates {
        if let (Some(e), Some(g), Some(s)) = (r.eff, r.gen, r.spec) {
            values.push(eds(100.0 * e, 100.0 * g, 100.0 * s)?.value);
        }
    }
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}
