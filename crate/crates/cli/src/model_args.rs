//! Model selection flags shared by every subcommand that builds a network.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::Value;

use san_core::attention::{Operator, PairwiseRelation, PatchRelation, PositionMode, Sharing};
use san_core::models::{ModelSpec, PRESETS};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorKind {
    Pairwise,
    Patchwise,
    Scalar,
    Conv,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset name: san10, san15, san19, resnet26, resnet38, resnet50, san-tiny.
    #[arg(long)]
    pub model: Option<String>,
    /// JSON model spec file; replaces --model.
    #[arg(long, conflicts_with = "model")]
    pub spec: Option<PathBuf>,
    /// Attention operator family. Reduction factors of the preset are kept.
    #[arg(long, value_enum)]
    pub attention: Option<OperatorKind>,
    /// Relation function, e.g. subtraction, dot, concatenation, star_product.
    #[arg(long)]
    pub relation: Option<String>,
    /// Position encoding for pairwise attention: none, absolute, relative.
    #[arg(long)]
    pub position: Option<String>,
    /// Softmax over the footprint for scalar attention.
    #[arg(long)]
    pub normalize: bool,
    /// Footprint of every stage after the first.
    #[arg(long)]
    pub footprint: Option<usize>,
    #[arg(long)]
    pub gamma_depth: Option<usize>,
    #[arg(long)]
    pub r1: Option<usize>,
    #[arg(long)]
    pub r2: Option<usize>,
    /// Number of value channels that share one attention weight.
    #[arg(long)]
    pub share: Option<usize>,
    /// Weight sharing among the feature transforms: distinct, phi_psi, all.
    #[arg(long)]
    pub sharing: Option<String>,
    /// Input resolution used for MAC counts and building.
    #[arg(long)]
    pub input_hw: Option<usize>,
}

/// Parses a snake_case enum through its serde form; dashes are accepted.
pub fn parse_named<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.replace('-', "_")))
        .map_err(|_| UsageError(format!("unknown {what} '{s}'")).into())
}

fn pairwise_relation(s: Option<&str>, current: Option<PairwiseRelation>) -> Result<PairwiseRelation> {
    match s {
        Some(s) => parse_named("pairwise relation", s),
        None => Ok(current.unwrap_or(PairwiseRelation::Subtraction)),
    }
}

fn patch_relation(s: Option<&str>, current: Option<PatchRelation>) -> Result<PatchRelation> {
    match s {
        Some(s) => parse_named("patchwise relation", s),
        None => Ok(current.unwrap_or(PatchRelation::Concatenation)),
    }
}

impl ModelArgs {
    fn overrides_attention(&self) -> bool {
        self.attention.is_some()
            || self.relation.is_some()
            || self.position.is_some()
            || self.normalize
            || self.gamma_depth.is_some()
            || self.r1.is_some()
            || self.r2.is_some()
            || self.share.is_some()
            || self.sharing.is_some()
    }

    /// The spec after applying every override, validated.
    pub fn resolve(&self, default_model: &str) -> Result<ModelSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read spec {}: {e}", path.display())))?;
                serde_json::from_str::<ModelSpec>(&text)
                    .map_err(|e| UsageError(format!("invalid spec {}: {e}", path.display())))?
            }
            None => {
                let name = self.model.as_deref().unwrap_or(default_model);
                ModelSpec::preset(name, None).map_err(|_| {
                    UsageError(format!("unknown model '{name}' (expected one of {})", PRESETS.join(", ")))
                })?
            }
        };
        if self.overrides_attention() {
            let name = spec.name.clone();
            let att = spec
                .attention_mut()
                .ok_or_else(|| UsageError(format!("model '{name}' has no attention to override")))?;
            let kind = self.attention.unwrap_or(match att.operator {
                Operator::Pairwise { .. } => OperatorKind::Pairwise,
                Operator::Patchwise { .. } => OperatorKind::Patchwise,
                Operator::Scalar { .. } => OperatorKind::Scalar,
                Operator::Conv => OperatorKind::Conv,
            });
            if self.position.is_some() && kind != OperatorKind::Pairwise {
                return Err(UsageError("--position applies to pairwise attention only".into()).into());
            }
            if self.relation.is_some() && !matches!(kind, OperatorKind::Pairwise | OperatorKind::Patchwise) {
                return Err(UsageError("--relation applies to pairwise and patchwise attention only".into()).into());
            }
            if self.normalize && kind != OperatorKind::Scalar {
                return Err(UsageError("--normalize applies to scalar attention only".into()).into());
            }
            att.operator = match kind {
                OperatorKind::Pairwise => {
                    let (rel, pos) = match att.operator {
                        Operator::Pairwise { relation, position } => (Some(relation), Some(position)),
                        _ => (None, None),
                    };
                    let position = match &self.position {
                        Some(s) => parse_named::<PositionMode>("position mode", s)?,
                        None => pos.unwrap_or(PositionMode::Relative),
                    };
                    Operator::Pairwise { relation: pairwise_relation(self.relation.as_deref(), rel)?, position }
                }
                OperatorKind::Patchwise => {
                    let rel = match att.operator {
                        Operator::Patchwise { relation } => Some(relation),
                        _ => None,
                    };
                    Operator::Patchwise { relation: patch_relation(self.relation.as_deref(), rel)? }
                }
                OperatorKind::Scalar => Operator::Scalar { normalize: self.normalize },
                OperatorKind::Conv => Operator::Conv,
            };
            if let Some(d) = self.gamma_depth {
                att.gamma_depth = d;
            }
            if let Some(r) = self.r1 {
                att.r1 = r;
            }
            if let Some(r) = self.r2 {
                att.r2 = r;
            }
            if let Some(s) = self.share {
                att.share = s;
            }
            if let Some(s) = &self.sharing {
                att.sharing = parse_named::<Sharing>("sharing mode", s)?;
            }
        }
        if let Some(k) = self.footprint {
            spec = spec.with_footprint(k)?;
        }
        if let Some(hw) = self.input_hw {
            spec.input_hw = hw;
        }
        spec.validate().with_context(|| format!("model '{}'", spec.name))?;
        Ok(spec)
    }
}
