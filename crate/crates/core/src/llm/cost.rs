use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Usage;

/// Price per 1K tokens in each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_1k: Decimal,
    pub output_per_1k: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("no price configured for model {0}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, model: impl Into<String>, input_per_1k: Decimal, output_per_1k: Decimal) -> Self {
        self.insert(model, input_per_1k, output_per_1k);
        self
    }

    pub fn insert(&mut self, model: impl Into<String>, input_per_1k: Decimal, output_per_1k: Decimal) {
        self.models.insert(
            model.into(),
            ModelPrice {
                input_per_1k,
                output_per_1k,
            },
        );
    }

    pub fn get(&self, model: &str) -> Option<&ModelPrice> {
        self.models.get(model)
    }

    pub fn contains(&self, model: &str) -> bool {
        self.models.contains_key(model)
    }

    pub fn accumulate_cost(&self, model: &str, usage: &Usage) -> Result<Decimal, CostError> {
        let price = self
            .models
            .get(model)
            .ok_or_else(|| CostError::UnknownModel(model.to_string()))?;
        let thousand = Decimal::from(1000);
        Ok(Decimal::from(usage.prompt_tokens) * price.input_per_1k / thousand
            + Decimal::from(usage.completion_tokens) * price.output_per_1k / thousand)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub model: String,
    pub usage: Usage,
    pub cost: Decimal,
}

/// Per-session record of every model call and its cost.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
    total: Decimal,
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, prices: &PriceTable, model: &str, usage: Usage) -> Result<Decimal, CostError> {
        let cost = prices.accumulate_cost(model, &usage)?;
        self.push(CostEntry {
            model: model.to_string(),
            usage,
            cost,
        });
        Ok(cost)
    }

    pub fn push(&mut self, entry: CostEntry) {
        self.total += entry.cost;
        self.prompt_tokens += entry.usage.prompt_tokens;
        self.completion_tokens += entry.usage.completion_tokens;
        self.entries.push(entry);
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for e in &other.entries {
            self.push(e.clone());
        }
    }

    pub fn total(&self) -> Decimal {
        self.total
    }

    pub fn calls(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.prompt_tokens
    }

    pub fn completion_tokens(&self) -> u64 {
        self.completion_tokens
    }
}
