//! Dimension and metric schemas.

use std::collections::HashSet;

use thiserror::Error;

use crate::formula::{self, Expr};

/// Reserved label marking an aggregated position in a node key.
pub const AGG: &str = "AGG";

/// Characters that would collide with the key/label file syntax.
const FORBIDDEN_IN_LABELS: &[char] = &['|', ';', '\n'];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("duplicate dimension name `{0}`")]
    DuplicateDimension(String),
    #[error("duplicate value `{value}` in dimension `{dimension}`")]
    DuplicateValue { dimension: String, value: String },
    #[error("`{0}` is reserved and may not appear as a data value")]
    ReservedLabel(String),
    #[error("label `{0}` contains a forbidden character (one of `|`, `;`, newline)")]
    ForbiddenCharacter(String),
    #[error("schema must have at least one dimension")]
    NoDimensions,
    #[error("dimension `{0}` has no values")]
    EmptyDimension(String),
    #[error("metric schema needs at least one fundamental and one derived metric")]
    MissingMetrics,
    #[error("duplicate metric name `{0}`")]
    DuplicateMetric(String),
    #[error("formula for `{name}` references `{reference}` which is not a fundamental or previously defined derived metric")]
    UnknownReference { name: String, reference: String },
    #[error("formula for `{name}`: {source}")]
    BadFormula {
        name: String,
        source: formula::FormulaError,
    },
}

/// Ordered dimensions and the distinct value labels of each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionSchema {
    dims: Vec<String>,
    values: Vec<Vec<String>>,
}

impl DimensionSchema {
    pub fn new(dims: Vec<String>, values: Vec<Vec<String>>) -> Result<Self, SchemaError> {
        if dims.is_empty() {
            return Err(SchemaError::NoDimensions);
        }
        assert_eq!(dims.len(), values.len(), "one value list per dimension");
        let mut seen = HashSet::new();
        for d in &dims {
            check_label(d)?;
            if !seen.insert(d.clone()) {
                return Err(SchemaError::DuplicateDimension(d.clone()));
            }
        }
        for (d, vals) in dims.iter().zip(&values) {
            if vals.is_empty() {
                return Err(SchemaError::EmptyDimension(d.clone()));
            }
            let mut seen = HashSet::new();
            for v in vals {
                check_label(v)?;
                if !seen.insert(v.clone()) {
                    return Err(SchemaError::DuplicateValue {
                        dimension: d.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        Ok(Self { dims, values })
    }

    /// Number of dimensions (the depth of the full tree).
    pub fn num_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn dim_names(&self) -> &[String] {
        &self.dims
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d == name)
    }

    pub fn values_of(&self, dim: usize) -> &[String] {
        &self.values[dim]
    }

    pub fn has_value(&self, dim: usize, label: &str) -> bool {
        self.values[dim].iter().any(|v| v == label)
    }
}

fn check_label(label: &str) -> Result<(), SchemaError> {
    if label == AGG {
        return Err(SchemaError::ReservedLabel(label.to_string()));
    }
    if label.is_empty() || label.contains(FORBIDDEN_IN_LABELS) {
        return Err(SchemaError::ForbiddenCharacter(label.to_string()));
    }
    Ok(())
}

/// How a fundamental metric aggregates from children to parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Sum,
    Mean,
}

impl AggFn {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SUM" => Some(AggFn::Sum),
            "MEAN" => Some(AggFn::Mean),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggFn::Sum => "SUM",
            AggFn::Mean => "MEAN",
        }
    }
}

/// A derived metric: a name plus a formula over earlier metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedMetric {
    pub name: String,
    pub expr: Expr,
}

/// Fundamental metrics with their aggregation functions, plus ordered
/// derived metric definitions. Derived formulas may reference fundamentals
/// and previously defined derived metrics only, so evaluation in definition
/// order is always acyclic.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSchema {
    fundamentals: Vec<(String, AggFn)>,
    derived: Vec<DerivedMetric>,
}

impl MetricSchema {
    pub fn new(
        fundamentals: Vec<(String, AggFn)>,
        derived: Vec<(String, String)>,
    ) -> Result<Self, SchemaError> {
        if fundamentals.is_empty() || derived.is_empty() {
            return Err(SchemaError::MissingMetrics);
        }
        let mut known = HashSet::new();
        for (name, _) in &fundamentals {
            check_label(name)?;
            if !known.insert(name.clone()) {
                return Err(SchemaError::DuplicateMetric(name.clone()));
            }
        }
        let mut parsed = Vec::with_capacity(derived.len());
        for (name, text) in derived {
            check_label(&name)?;
            if !known.insert(name.clone()) {
                return Err(SchemaError::DuplicateMetric(name.clone()));
            }
            let expr = formula::parse(&text).map_err(|source| SchemaError::BadFormula {
                name: name.clone(),
                source,
            })?;
            for reference in expr.variables() {
                // `known` already contains this metric's name, but
                // self-reference is impossible: it was inserted after parse
                // inputs were fixed, so check against everything but itself.
                if reference == name || !known.contains(&reference) {
                    return Err(SchemaError::UnknownReference { name, reference });
                }
            }
            parsed.push(DerivedMetric { name, expr });
        }
        Ok(Self {
            fundamentals,
            derived: parsed,
        })
    }

    /// Number of fundamental metrics.
    pub fn num_fundamentals(&self) -> usize {
        self.fundamentals.len()
    }

    /// Number of derived metrics.
    pub fn num_derived(&self) -> usize {
        self.derived.len()
    }

    pub fn fundamentals(&self) -> impl Iterator<Item = (&str, AggFn)> {
        self.fundamentals.iter().map(|(n, a)| (n.as_str(), *a))
    }

    pub fn derived(&self) -> &[DerivedMetric] {
        &self.derived
    }

    /// All metric names, fundamentals first then deriveds in definition
    /// order. Panel and model outputs follow this order everywhere.
    pub fn metric_names(&self) -> Vec<String> {
        self.fundamentals
            .iter()
            .map(|(n, _)| n.clone())
            .chain(self.derived.iter().map(|d| d.name.clone()))
            .collect()
    }

    /// Index into the combined fundamentals-then-deriveds order.
    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.fundamentals
            .iter()
            .position(|(n, _)| n == name)
            .or_else(|| {
                self.derived
                    .iter()
                    .position(|d| d.name == name)
                    .map(|i| i + self.fundamentals.len())
            })
    }

    pub fn agg_fn(&self, fundamental: usize) -> AggFn {
        self.fundamentals[fundamental].1
    }

    /// Evaluate every derived metric given this node's fundamental values,
    /// returning them in definition order.
    pub fn eval_derived(&self, fundamentals: &[f64]) -> Result<Vec<f64>, formula::FormulaError> {
        assert_eq!(fundamentals.len(), self.fundamentals.len());
        let mut out: Vec<f64> = Vec::with_capacity(self.derived.len());
        for d in &self.derived {
            let value = d.expr.eval(&mut |name| {
                self.fundamentals
                    .iter()
                    .position(|(n, _)| n == name)
                    .map(|i| fundamentals[i])
                    .or_else(|| {
                        self.derived
                            .iter()
                            .position(|m| m.name == name)
                            .and_then(|i| out.get(i).copied())
                    })
            })?;
            out.push(value);
        }
        Ok(out)
    }

    /// Stable fingerprint of metric names, aggregation choices and formulas;
    /// stored in model files to catch schema drift.
    pub fn fingerprint(&self, dims: &DimensionSchema) -> u64 {
        let mut h = Fnv::new();
        for d in dims.dim_names() {
            h.write(d.as_bytes());
            h.write(b"\x1f");
        }
        for (n, a) in &self.fundamentals {
            h.write(n.as_bytes());
            h.write(a.name().as_bytes());
            h.write(b"\x1f");
        }
        for d in &self.derived {
            h.write(d.name.as_bytes());
            h.write(d.expr.to_string().as_bytes());
            h.write(b"\x1f");
        }
        h.finish()
    }
}

/// FNV-1a, enough for a schema fingerprint.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
