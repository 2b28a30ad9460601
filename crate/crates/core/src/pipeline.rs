//! End-to-end runs: fit → graph → sequential edits → evaluation, and sweeps.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{generate, paraphrase_of, read_chains_jsonl, write_chains_jsonl, Benchmark};
use crate::config::RunConfig;
use crate::edit::{run_edit, EditOutcome};
use crate::error::{Error, Result};
use crate::gnn::GnnParams;
use crate::io::write_atomic;
use crate::kg::{build_seeded_graph, ingest_triples, write_triples_tsv, HyperbolicGraph, Triple, TripleFormat};
use crate::metrics::{
    case_rates, case_report, eds, efficacy, generalization, multi_hop_efficacy, per_case_eds_mean, portability,
    reference_row_discrepancy, specificity, CaseRates, CaseReport, Chain, EdsDiscrepancy, KnowledgeBase, Rate,
};
use crate::model::{FitReport, ToyModel, Vocab};
use crate::request::{read_requests_jsonl, write_requests_jsonl, EditRequest, Prompt};

/// Set to any value to evaluate cases on the calling thread only.
pub const SINGLE_THREAD_ENV: &str = "HYPEREDIT_SINGLE_THREAD";

/// Upper bound on disconnected control prompts checked per edit.
pub const CONTROL_LIMIT: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchData {
    pub triples: Vec<Triple>,
    pub requests: Vec<EditRequest>,
    pub chains: Vec<Chain>,
}

impl From<Benchmark> for BenchData {
    fn from(b: Benchmark) -> Self {
        BenchData { triples: b.triples, requests: b.requests, chains: b.chains }
    }
}

impl BenchData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(generate(&cfg.bench)?.into())
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let triples = ingest_triples(std::fs::File::open(&p.triples)?, TripleFormat::from_path(&p.triples))?;
        let requests = read_requests_jsonl(&std::fs::read_to_string(&p.requests)?)?;
        let chains = if p.chains.exists() { read_chains_jsonl(&std::fs::read_to_string(&p.chains)?)? } else { Vec::new() };
        Ok(BenchData { triples, requests, chains })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("triples.tsv"), write_triples_tsv(&self.triples).as_bytes())?;
        write_atomic(&dir.join("requests.jsonl"), write_requests_jsonl(&self.requests)?.as_bytes())?;
        write_atomic(&dir.join("chains.jsonl"), write_chains_jsonl(&self.chains)?.as_bytes())?;
        Ok(())
    }
}

/// Canonical and paraphrased prompt for every fact.
pub fn fit_examples(triples: &[Triple]) -> Vec<(Prompt, String)> {
    let mut out = Vec::with_capacity(2 * triples.len());
    for t in triples {
        out.push((Prompt::new(t.subject.as_str(), t.relation.as_str()), t.object.clone()));
        out.push((Prompt::new(t.subject.as_str(), paraphrase_of(&t.relation)), t.object.clone()));
    }
    out
}

pub fn fit_model(cfg: &RunConfig, triples: &[Triple]) -> Result<(ToyModel, FitReport)> {
    let m = &cfg.model;
    let vocab = Vocab::from_triples(triples, m.paraphrase_spread, m.portability_spread)?;
    let mut model = ToyModel::new(vocab, cfg.model_config()?)?;
    let report = model.fit(&fit_examples(triples), &cfg.fit)?;
    Ok((model, report))
}

pub fn build_graph(cfg: &RunConfig, triples: &[Triple]) -> Result<HyperbolicGraph> {
    build_seeded_graph(triples, cfg.graph.dim, cfg.graph_seed(), cfg.graph_config()?)
}

pub fn new_gnn(cfg: &RunConfig, graph: &HyperbolicGraph, model: &ToyModel) -> Result<GnnParams> {
    GnnParams::new(graph.dim, model.dims(), cfg.gnn_config())
}

/// Canonical prompts of facts in components other than those of the
/// request's subject and new target, thinned to at most `limit`.
pub fn control_prompts(graph: &HyperbolicGraph, triples: &[Triple], request: &EditRequest, limit: usize) -> Result<Vec<Prompt>> {
    let comps = graph.components();
    let mut touched = HashSet::new();
    for name in [&request.subject, &request.target_new.token, &request.target_true.token] {
        if let Ok(id) = graph.node_id(name) {
            touched.insert(comps[id]);
        }
    }
    let pool: Vec<&Triple> =
        triples.iter().filter(|t| graph.node_id(&t.subject).is_ok_and(|id| !touched.contains(&comps[id]))).collect();
    if pool.is_empty() || limit == 0 {
        return Ok(Vec::new());
    }
    let stride = pool.len().div_ceil(limit);
    Ok(pool.iter().step_by(stride).map(|t| Prompt::new(t.subject.as_str(), t.relation.as_str())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlStats {
    pub count: usize,
    /// Fraction of control prompts whose top-1 entity did not change.
    pub kept: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
}

fn kl(p_log: &ndarray::Array1<f64>, q_log: &ndarray::Array1<f64>) -> f64 {
    p_log.iter().zip(q_log).map(|(p, q)| p.exp() * (p - q)).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub case_id: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<EditOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlStats>,
}

pub struct EditBatch {
    pub model: ToyModel,
    pub records: Vec<EditRecord>,
}

/// Applies every request in order to a copy of `model`. Failures are
/// recorded per case and the batch continues from the pre-edit state.
pub fn edit_batch(
    cfg: &RunConfig,
    model: &ToyModel,
    graph: &HyperbolicGraph,
    triples: &[Triple],
    requests: &[EditRequest],
    mut on_record: impl FnMut(&EditRecord),
) -> Result<EditBatch> {
    let mut model = model.clone();
    let mut gnn = new_gnn(cfg, graph, &model)?;
    let edit_cfg = cfg.edit_config()?;
    let mut records = Vec::with_capacity(requests.len());
    for req in requests {
        let controls = control_prompts(graph, triples, req, CONTROL_LIMIT)?;
        let before = controls.iter().map(|p| model.log_probs(p)).collect::<Result<Vec<_>>>()?;
        let top_before = controls.iter().map(|p| model.top1_entity(p)).collect::<Result<Vec<_>>>()?;
        let record = match run_edit(&mut model, graph, req, &mut gnn, &edit_cfg) {
            Ok(outcome) => {
                let mut kept = 0usize;
                let mut kls = Vec::with_capacity(controls.len());
                for ((p, lp), top) in controls.iter().zip(&before).zip(&top_before) {
                    kls.push(kl(lp, &model.log_probs(p)?));
                    kept += (model.top1_entity(p)? == *top) as usize;
                }
                let control = (!controls.is_empty()).then(|| ControlStats {
                    count: controls.len(),
                    kept: kept as f64 / controls.len() as f64,
                    mean_kl: kls.iter().sum::<f64>() / kls.len() as f64,
                    max_kl: kls.iter().copied().fold(0.0, f64::max),
                });
                EditRecord { case_id: req.case_id, status: Status::Ok, error: None, outcome: Some(outcome), control }
            }
            Err(e) => EditRecord {
                case_id: req.case_id,
                status: Status::Error,
                error: Some(e.to_string()),
                outcome: None,
                control: None,
            },
        };
        debug_assert!(gnn.is_at_initial());
        on_record(&record);
        records.push(record);
    }
    Ok(EditBatch { model, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub cases: usize,
    pub kept: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
}

pub fn summarize_controls(records: &[EditRecord]) -> Option<ControlSummary> {
    let stats: Vec<&ControlStats> = records.iter().filter_map(|r| r.control.as_ref()).collect();
    if stats.is_empty() {
        return None;
    }
    let n = stats.len() as f64;
    Some(ControlSummary {
        cases: stats.len(),
        kept: stats.iter().map(|s| s.kept).sum::<f64>() / n,
        mean_kl: stats.iter().map(|s| s.mean_kl).sum::<f64>() / n,
        max_kl: stats.iter().map(|s| s.max_kl).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Denominators {
    pub eff: Rate,
    pub gen: Rate,
    pub spec: Rate,
    pub port: Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    #[serde(rename = "Eff")]
    pub eff: f64,
    #[serde(rename = "Gen")]
    pub gen: f64,
    #[serde(rename = "Spec")]
    pub spec: f64,
    #[serde(rename = "Port")]
    pub port: f64,
}

/// Aggregate report; rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    #[serde(rename = "Eff")]
    pub eff: f64,
    #[serde(rename = "Gen")]
    pub gen: f64,
    #[serde(rename = "Spec")]
    pub spec: f64,
    #[serde(rename = "Port")]
    pub port: f64,
    #[serde(rename = "EDS")]
    pub eds: f64,
    pub eds_degenerate: bool,
    /// Mean of per-case EDS values, alongside the aggregate harmonic mean.
    pub eds_per_case_mean: Option<f64>,
    pub hops: BTreeMap<String, f64>,
    pub denominators: Denominators,
    pub disconnected_control: Option<ControlSummary>,
    pub failed_cases: Vec<u64>,
    pub baseline: Option<Baseline>,
    pub eds_reference_check: EdsDiscrepancy,
    pub seed: u64,
    pub config: RunConfig,
}

pub struct Evaluation {
    pub cases: Vec<CaseReport>,
    pub rates: Vec<CaseRates>,
    pub aggregate: AggregateReport,
}

fn single_threaded() -> bool {
    std::env::var_os(SINGLE_THREAD_ENV).is_some()
}

fn map_cases<T: Send>(requests: &[EditRequest], f: impl Fn(&EditRequest) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if single_threaded() {
        requests.iter().map(f).collect()
    } else {
        requests.par_iter().map(f).collect()
    }
}

fn baseline(original: &ToyModel, requests: &[EditRequest]) -> Result<Baseline> {
    Ok(Baseline {
        eff: efficacy(original, requests)?.percent(),
        gen: generalization(original, requests)?.percent(),
        spec: specificity(original, requests)?.percent(),
        port: portability(original, requests)?.percent(),
    })
}

/// Scores `edited` on every request. Case times and control statistics come
/// from the edit records when given.
pub fn evaluate(
    cfg: &RunConfig,
    edited: &ToyModel,
    original: Option<&ToyModel>,
    data: &BenchData,
    records: &[EditRecord],
) -> Result<Evaluation> {
    let times: BTreeMap<u64, f64> =
        records.iter().filter_map(|r| r.outcome.as_ref().map(|o| (r.case_id, o.time))).collect();
    let cases = map_cases(&data.requests, |r| case_report(edited, r, times.get(&r.case_id).copied().unwrap_or(0.0)))?;
    let rates = map_cases(&data.requests, |r| case_rates(edited, r))?;

    let pick = |f: fn(&CaseRates) -> Option<f64>| Rate::from_cases(&rates.iter().map(f).collect::<Vec<_>>());
    let den = Denominators {
        eff: pick(|r| r.eff),
        gen: pick(|r| r.gen),
        spec: pick(|r| r.spec),
        port: pick(|r| r.port),
    };
    let e = eds(den.eff.percent(), den.gen.percent(), den.spec.percent())?;

    let kb = KnowledgeBase::with_edits(&data.triples, &data.requests);
    let hop_counts: std::collections::BTreeSet<usize> = data.chains.iter().map(Chain::hops).collect();
    let mut hops = BTreeMap::new();
    for h in hop_counts {
        hops.insert(h.to_string(), multi_hop_efficacy(edited, &kb, &data.chains, h)?.percent());
    }

    let aggregate = AggregateReport {
        eff: den.eff.percent(),
        gen: den.gen.percent(),
        spec: den.spec.percent(),
        port: den.port.percent(),
        eds: e.value,
        eds_degenerate: e.degenerate,
        eds_per_case_mean: per_case_eds_mean(&rates)?,
        hops,
        denominators: den,
        disconnected_control: summarize_controls(records),
        failed_cases: records.iter().filter(|r| r.status == Status::Error).map(|r| r.case_id).collect(),
        baseline: original.map(|o| baseline(o, &data.requests)).transpose()?,
        eds_reference_check: reference_row_discrepancy(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    Ok(Evaluation { cases, rates, aggregate })
}

pub fn rates_csv(rates: &[CaseRates]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rates {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Everything produced by one full run.
pub struct RunOutput {
    pub fit: FitReport,
    pub original: ToyModel,
    pub batch: EditBatch,
    pub evaluation: Evaluation,
}

pub fn run_pipeline(cfg: &RunConfig, data: &BenchData) -> Result<RunOutput> {
    let (original, fit) = fit_model(cfg, &data.triples)?;
    run_with_model(cfg, data, original, fit)
}

pub fn run_with_model(cfg: &RunConfig, data: &BenchData, original: ToyModel, fit: FitReport) -> Result<RunOutput> {
    let graph = build_graph(cfg, &data.triples)?;
    let batch = edit_batch(cfg, &original, &graph, &data.triples, &data.requests, |_| {})?;
    let evaluation = evaluate(cfg, &batch.model, Some(&original), data, &batch.records)?;
    Ok(RunOutput { fit, original, batch, evaluation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Curvature,
    Tau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub status: Status,
    #[serde(rename = "Eff")]
    pub eff: Option<f64>,
    #[serde(rename = "Gen")]
    pub gen: Option<f64>,
    #[serde(rename = "Spec")]
    pub spec: Option<f64>,
    #[serde(rename = "EDS")]
    pub eds: Option<f64>,
    pub error: Option<String>,
}

/// Full pipeline per value with everything else (seed included) shared.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64], data: &BenchData) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::Curvature => c.curvature = value,
            SweepAxis::Tau => c.tau = value,
        }
        let row = match c.validate().and_then(|_| run_pipeline(&c, data)) {
            Ok(out) => {
                let a = &out.evaluation.aggregate;
                SweepRow {
                    value,
                    status: Status::Ok,
                    eff: Some(a.eff),
                    gen: Some(a.gen),
                    spec: Some(a.spec),
                    eds: Some(a.eds),
                    error: None,
                }
            }
            Err(e) => SweepRow {
                value,
                status: Status::Error,
                eff: None,
                gen: None,
                spec: None,
                eds: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Newline-terminated JSON.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value)?;
    s.push('\n');
    Ok(s)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
