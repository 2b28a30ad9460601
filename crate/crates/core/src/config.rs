//! File-backed run configuration.
//!
//! Defaults sit inside the ranges of the reference hyperparameter table:
//! 30 GNN steps (25–35), lr 0.5, weight decay 0.1, dropout 0.2/0.3,
//! KL factor 0.07 (0.0625–0.075), early-stop loss 0.03.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::edit::{derive_seed, EditConfig, GammaMode, UpdateRule};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, OptConfig};
use crate::hyperbolic::Curvature;
use crate::kg::{GraphConfig, NormRule};
use crate::model::{FitConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnSection {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_attn: f64,
    pub dropout_feat: f64,
    pub hidden_dim: usize,
    pub rounds: usize,
    pub head_scale: f64,
    pub clip_norm: f64,
}

impl Default for GnnSection {
    fn default() -> Self {
        let o = OptConfig::default();
        let g = GnnConfig::default();
        GnnSection {
            steps: o.steps,
            lr: o.lr,
            weight_decay: o.weight_decay,
            dropout_attn: o.dropout_attn,
            dropout_feat: o.dropout_feat,
            hidden_dim: g.hidden_dim,
            rounds: g.rounds,
            head_scale: g.head_scale,
            clip_norm: o.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub dim: usize,
    pub norm_rule: NormRule,
    pub hard_prune: bool,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { dim: 16, norm_rule: NormRule::default(), hard_prune: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub key_dim: usize,
    pub embed_dim: usize,
    pub relation_scale: f64,
    pub mixing_gain: f64,
    pub paraphrase_spread: f64,
    pub portability_spread: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            key_dim: m.key_dim,
            embed_dim: m.embed_dim,
            relation_scale: m.relation_scale,
            mixing_gain: m.mixing_gain,
            paraphrase_spread: m.paraphrase_spread,
            portability_spread: m.portability_spread,
        }
    }
}

/// File locations; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub triples: PathBuf,
    pub requests: PathBuf,
    pub chains: PathBuf,
    pub model: PathBuf,
    pub edited_model: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            triples: "triples.tsv".into(),
            requests: "requests.jsonl".into(),
            chains: "chains.jsonl".into(),
            model: "out/model.json".into(),
            edited_model: "out/edited_model.json".into(),
            out_dir: "out".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.triples,
            &mut self.requests,
            &mut self.chains,
            &mut self.model,
            &mut self.edited_model,
            &mut self.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub curvature: f64,
    pub tau: f64,
    pub tau_g: f64,
    pub kl_factor: f64,
    pub early_stop_loss: f64,
    pub gamma_mode: GammaMode,
    pub gamma_cap: f64,
    pub max_cycles: usize,
    pub update: UpdateRule,
    pub gnn: GnnSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub fit: FitConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EditConfig::default();
        RunConfig {
            seed: 42,
            curvature: 1.0,
            tau: 0.5,
            tau_g: e.tau_g,
            kl_factor: e.kl_factor,
            early_stop_loss: e.gnn.early_stop_loss,
            gamma_mode: e.gamma_mode,
            gamma_cap: e.gamma_cap,
            max_cycles: e.max_cycles,
            update: e.update,
            gnn: GnnSection::default(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            fit: FitConfig::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

// sub-seeds for the independent random streams of one run
const GRAPH_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const GNN_STREAM: u64 = 3;
const EDIT_STREAM: u64 = 4;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        Curvature::new(self.curvature)?;
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        if self.graph.dim < 2 {
            return Err(Error::Config("graph.dim must be at least 2".into()));
        }
        self.edit_config()?.validate()
    }

    pub fn curvature(&self) -> Result<Curvature> {
        Curvature::new(self.curvature)
    }

    pub fn graph_config(&self) -> Result<GraphConfig> {
        Ok(GraphConfig {
            curvature: self.curvature()?,
            tau: self.tau,
            norm_rule: self.graph.norm_rule,
            hard_prune: self.graph.hard_prune,
        })
    }

    pub fn graph_seed(&self) -> u64 {
        derive_seed(self.seed, &[GRAPH_STREAM])
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            hidden: m.hidden,
            key_dim: m.key_dim,
            embed_dim: m.embed_dim,
            relation_scale: m.relation_scale,
            mixing_gain: m.mixing_gain,
            paraphrase_spread: m.paraphrase_spread,
            portability_spread: m.portability_spread,
            curvature: self.curvature()?,
            seed: derive_seed(self.seed, &[MODEL_STREAM]),
        })
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            hidden_dim: self.gnn.hidden_dim,
            rounds: self.gnn.rounds,
            head_scale: self.gnn.head_scale,
            seed: derive_seed(self.seed, &[GNN_STREAM]),
        }
    }

    pub fn edit_config(&self) -> Result<EditConfig> {
        Ok(EditConfig {
            tau_g: self.tau_g,
            gamma_mode: self.gamma_mode,
            gamma_cap: self.gamma_cap,
            kl_factor: self.kl_factor,
            max_cycles: self.max_cycles,
            update: self.update,
            gnn: OptConfig {
                steps: self.gnn.steps,
                lr: self.gnn.lr,
                weight_decay: self.gnn.weight_decay,
                dropout_attn: self.gnn.dropout_attn,
                dropout_feat: self.gnn.dropout_feat,
                early_stop_loss: self.early_stop_loss,
                clip_norm: self.gnn.clip_norm,
            },
            seed: derive_seed(self.seed, &[EDIT_STREAM]),
            inject_fault: None,
        })
    }
}
