//! Built-in, closed catalog of stage functions and filter predicates.

use crate::domain::{FnRef, Payload};

use super::OperatorError;

/// A resolved catalog function. Every function works on the ordered list of
/// input payloads; a mapping stage passes a list of one.
#[derive(Clone, Debug, PartialEq)]
pub enum CatalogFn {
    Identity,
    Scale { ratio: f64 },
    Affine { a: f64, b: f64 },
    Concat,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    /// Passes when `payload[index] >= min`; a missing index fails.
    Threshold { index: usize, min: f64 },
}

fn arg(f: &FnRef, key: &str) -> Result<f64, OperatorError> {
    let v = f.args.get(key).copied().ok_or_else(|| OperatorError::BadArgument {
        name: f.name.clone(),
        reason: format!("missing argument `{key}`"),
    })?;
    if !v.is_finite() {
        return Err(OperatorError::BadArgument {
            name: f.name.clone(),
            reason: format!("argument `{key}` is not finite"),
        });
    }
    Ok(v)
}

fn no_extra_args(f: &FnRef, allowed: &[&str]) -> Result<(), OperatorError> {
    match f.args.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(OperatorError::BadArgument {
            name: f.name.clone(),
            reason: format!("unexpected argument `{k}`"),
        }),
        None => Ok(()),
    }
}

pub fn resolve_fn(f: &FnRef) -> Result<CatalogFn, OperatorError> {
    let resolved = match f.name.as_str() {
        "identity" => {
            no_extra_args(f, &[])?;
            CatalogFn::Identity
        }
        "scale" => {
            no_extra_args(f, &["ratio"])?;
            CatalogFn::Scale { ratio: arg(f, "ratio")? }
        }
        "affine" => {
            no_extra_args(f, &["a", "b"])?;
            CatalogFn::Affine { a: arg(f, "a")?, b: arg(f, "b")? }
        }
        "concat" => {
            no_extra_args(f, &[])?;
            CatalogFn::Concat
        }
        "mean" => {
            no_extra_args(f, &[])?;
            CatalogFn::Mean
        }
        _ => return Err(OperatorError::UnknownFn(f.name.clone())),
    };
    Ok(resolved)
}

pub fn resolve_predicate(f: &FnRef) -> Result<Predicate, OperatorError> {
    match f.name.as_str() {
        "threshold" => {
            no_extra_args(f, &["index", "min"])?;
            let index = arg(f, "index")?;
            if index < 0.0 || index.fract() != 0.0 {
                return Err(OperatorError::BadArgument {
                    name: f.name.clone(),
                    reason: "index must be a non-negative integer".into(),
                });
            }
            Ok(Predicate::Threshold { index: index as usize, min: arg(f, "min")? })
        }
        _ => Err(OperatorError::UnknownPredicate(f.name.clone())),
    }
}

impl CatalogFn {
    pub fn apply(&self, inputs: &[&Payload]) -> Payload {
        let concat = || inputs.iter().flat_map(|p| p.iter().copied());
        match self {
            CatalogFn::Identity | CatalogFn::Concat => concat().collect(),
            CatalogFn::Scale { ratio } => concat().map(|x| x * ratio).collect(),
            CatalogFn::Affine { a, b } => concat().map(|x| a * x + b).collect(),
            CatalogFn::Mean => elementwise_mean(inputs),
        }
    }
}

impl Predicate {
    pub fn holds(&self, payload: &Payload) -> bool {
        match self {
            Predicate::Threshold { index, min } => payload.get(*index).is_some_and(|v| v >= min),
        }
    }
}

/// Position-wise mean across vectors (each position averaged over the inputs
/// that have it). Computed as `x0 + sum((xi - x0) / n)` after a canonical sort,
/// which makes it order-independent and exact on identical inputs.
pub fn elementwise_mean(inputs: &[&Payload]) -> Payload {
    let len = inputs.iter().map(|p| p.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let mut column: Vec<f64> = inputs.iter().filter_map(|p| p.get(i).copied()).collect();
            column.sort_by(f64::total_cmp);
            let n = column.len() as f64;
            let x0 = column[0];
            x0 + column.iter().map(|x| (x - x0) / n).sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_scale() {
        let f = resolve_fn(&FnRef::named("affine").with_arg("a", 2.0).with_arg("b", 1.0)).unwrap();
        assert_eq!(f.apply(&[&vec![1.0, 2.0, 3.0]]), vec![3.0, 5.0, 7.0]);
        let s = resolve_fn(&FnRef::named("scale").with_arg("ratio", 0.5)).unwrap();
        assert_eq!(s.apply(&[&vec![4.0]]), vec![2.0]);
    }

    #[test]
    fn mean_is_positionwise() {
        assert_eq!(elementwise_mean(&[&vec![1.0, 2.0], &vec![3.0, 4.0]]), vec![2.0, 3.0]);
        assert_eq!(elementwise_mean(&[&vec![1.0, 2.0], &vec![3.0]]), vec![2.0, 2.0]);
        assert_eq!(elementwise_mean(&[&vec![0.1]; 3]), vec![0.1]);
    }

    #[test]
    fn unknown_names_and_bad_args() {
        assert_eq!(resolve_fn(&FnRef::named("softmax")), Err(OperatorError::UnknownFn("softmax".into())));
        assert_eq!(
            resolve_predicate(&FnRef::named("identity")),
            Err(OperatorError::UnknownPredicate("identity".into()))
        );
        assert!(matches!(resolve_fn(&FnRef::named("scale")), Err(OperatorError::BadArgument { .. })));
        assert!(matches!(
            resolve_predicate(&FnRef::named("threshold").with_arg("index", 1.5).with_arg("min", 0.0)),
            Err(OperatorError::BadArgument { .. })
        ));
    }

    #[test]
    fn threshold_predicate() {
        let p = resolve_predicate(&FnRef::named("threshold").with_arg("index", 0.0).with_arg("min", 5.0)).unwrap();
        assert!(p.holds(&vec![7.0, 1.0]));
        assert!(!p.holds(&vec![3.0, 9.0]));
        assert!(!p.holds(&vec![]));
    }
}
