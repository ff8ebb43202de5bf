//! Query-to-map plumbing: retrieval, cost volume, filter.

use std::fmt;
use std::str::FromStr;

use crate::error::{RaidError, Result};
use crate::filter::{filter_forward, query_grid, AnomalyMap, FilterParameters};
use crate::interchange::TokenEmbeddingSet;
use crate::numerics::FeatureGrid;
use crate::retrieval::{
    build_cost_volume, CostVolume, RetrievalParams, RetrievalResult, Retriever,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrievalMode {
    Flat,
    #[default]
    Hierarchical,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Flat => "flat",
            RetrievalMode::Hierarchical => "hier",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = RaidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(RetrievalMode::Flat),
            "hier" | "hierarchical" => Ok(RetrievalMode::Hierarchical),
            other => Err(RaidError::InvalidArgument(format!(
                "unknown retrieval mode {other:?} (expected flat or hier)"
            ))),
        }
    }
}

/// Everything the filter consumes for one query.
#[derive(Debug, Clone)]
pub struct FilterInputs {
    pub query_grid: FeatureGrid,
    pub prototype_grid: FeatureGrid,
    pub cost: CostVolume,
    pub retrieval: RetrievalResult,
}

pub fn prepare_inputs(
    retriever: &Retriever<'_>,
    query: &TokenEmbeddingSet,
    mode: RetrievalMode,
    params: RetrievalParams,
    exclude_image: Option<&str>,
) -> Result<FilterInputs> {
    let retrieval = match mode {
        RetrievalMode::Hierarchical => {
            retriever.hierarchical_retrieve_excluding(query, params, exclude_image)?
        }
        RetrievalMode::Flat => retriever.flat_retrieve_excluding(query, params.k, exclude_image)?,
    };
    let cost = build_cost_volume(&retrieval, query)?;
    Ok(FilterInputs {
        query_grid: query_grid(query),
        prototype_grid: retriever.prototype_grid(&retrieval)?,
        cost,
        retrieval,
    })
}

#[derive(Debug, Clone)]
pub struct Detection {
    /// Filtered anomaly map.
    pub map: AnomalyMap,
    /// Unfiltered baseline: best-match cost per cell, halved into `[0, 1]`.
    pub min_cost_map: AnomalyMap,
    pub retrieval: RetrievalResult,
}

pub fn min_cost_map(
    cost: &CostVolume,
    source_height: usize,
    source_width: usize,
) -> Result<AnomalyMap> {
    let values = cost
        .min_cost()
        .into_iter()
        .map(|c| (c / 2.0).clamp(0.0, 1.0))
        .collect();
    AnomalyMap::new(
        cost.height(),
        cost.width(),
        values,
        source_height,
        source_width,
    )
}

/// Runs the whole pipeline on one query.
pub fn detect(
    retriever: &Retriever<'_>,
    filter: &FilterParameters,
    query: &TokenEmbeddingSet,
    mode: RetrievalMode,
    params: RetrievalParams,
) -> Result<Detection> {
    filter
        .config()
        .ensure_compatible(retriever.database().dim(), params.k)?;
    let inputs = prepare_inputs(retriever, query, mode, params, None)?;
    let out = filter_forward(
        &inputs.query_grid,
        &inputs.prototype_grid,
        &inputs.cost,
        filter,
    )?;
    Ok(Detection {
        map: out.into_anomaly_map(query.source_height(), query.source_width())?,
        min_cost_map: min_cost_map(&inputs.cost, query.source_height(), query.source_width())?,
        retrieval: inputs.retrieval,
    })
}
