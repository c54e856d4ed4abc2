//! Transformation operators and the reverse-Polish feature expression engine.
//!
//! A feature set is written as one token string:
//!
//! ```text
//! <SOS> f0 f1 + f2 * log <SEP> f3 <SEP> <EOS>
//! ```
//!
//! Each `<SEP>`-terminated segment is one postfix expression over the
//! original columns `f0 .. f{K-1}`. Every segment must leave exactly one value
//! on the evaluation stack.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};

pub const SOS: &str = "<SOS>";
pub const SEP: &str = "<SEP>";
pub const EOS: &str = "<EOS>";

/// Offset used by the guarded operators.
pub const SAFE_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },
    #[error("malformed RPN at position {position} ({token:?}): {fault}")]
    MalformedRpn {
        position: usize,
        token: String,
        fault: RpnFault,
    },
    #[error("bad framing: {0}")]
    Framing(String),
    #[error("a feature set needs at least one expression")]
    EmptySequence,
    #[error("feature f{index} referenced but the matrix has {columns} columns")]
    FeatureOutOfRange { index: usize, columns: usize },
    #[error("cannot build dataset: {0}")]
    Dataset(String),
}

impl From<DataError> for ExprError {
    fn from(e: DataError) -> Self {
        ExprError::Dataset(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpnFault {
    /// An operator found fewer operands than its arity.
    Underflow,
    /// The segment ended with this many values on the stack instead of one.
    Unbalanced { depth: usize },
}

impl fmt::Display for RpnFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpnFault::Underflow => f.write_str("stack underflow"),
            RpnFault::Unbalanced { depth } => {
                write!(f, "segment leaves {depth} values on the stack, expected 1")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arity {
    Unary,
    Binary,
}

impl Arity {
    pub fn operands(self) -> usize {
        match self {
            Arity::Unary => 1,
            Arity::Binary => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Add,
    Subtract,
    Multiply,
    SafeDivide,
    SafeLog,
    SafeSqrt,
    Square,
    SafeReciprocal,
    Abs,
    Sin,
    Cos,
    Tanh,
    Standardize,
    MinmaxScale,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 14] = [
        OperatorKind::Add,
        OperatorKind::Subtract,
        OperatorKind::Multiply,
        OperatorKind::SafeDivide,
        OperatorKind::SafeLog,
        OperatorKind::SafeSqrt,
        OperatorKind::Square,
        OperatorKind::SafeReciprocal,
        OperatorKind::Abs,
        OperatorKind::Sin,
        OperatorKind::Cos,
        OperatorKind::Tanh,
        OperatorKind::Standardize,
        OperatorKind::MinmaxScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Add => "add",
            OperatorKind::Subtract => "subtract",
            OperatorKind::Multiply => "multiply",
            OperatorKind::SafeDivide => "safe_divide",
            OperatorKind::SafeLog => "safe_log",
            OperatorKind::SafeSqrt => "safe_sqrt",
            OperatorKind::Square => "square",
            OperatorKind::SafeReciprocal => "safe_reciprocal",
            OperatorKind::Abs => "abs",
            OperatorKind::Sin => "sin",
            OperatorKind::Cos => "cos",
            OperatorKind::Tanh => "tanh",
            OperatorKind::Standardize => "standardize",
            OperatorKind::MinmaxScale => "minmax_scale",
        }
    }

    /// Token used in serialized strings.
    pub fn symbol(self) -> &'static str {
        match self {
            OperatorKind::Add => "+",
            OperatorKind::Subtract => "-",
            OperatorKind::Multiply => "*",
            OperatorKind::SafeDivide => "/",
            OperatorKind::SafeLog => "log",
            OperatorKind::SafeSqrt => "sqrt",
            OperatorKind::Square => "square",
            OperatorKind::SafeReciprocal => "reciprocal",
            OperatorKind::Abs => "abs",
            OperatorKind::Sin => "sin",
            OperatorKind::Cos => "cos",
            OperatorKind::Tanh => "tanh",
            OperatorKind::Standardize => "standardize",
            OperatorKind::MinmaxScale => "minmax",
        }
    }

    pub fn arity(self) -> Arity {
        match self {
            OperatorKind::Add
            | OperatorKind::Subtract
            | OperatorKind::Multiply
            | OperatorKind::SafeDivide => Arity::Binary,
            _ => Arity::Unary,
        }
    }

    /// Position in [`OperatorKind::ALL`]; the operator agent's action index.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Accepts the serialized symbol or the registry name.
    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.symbol() == token || k.name() == token)
    }

    /// Applies a unary operator to a whole column in place.
    pub fn apply_unary(self, x: &mut [f64]) {
        match self {
            OperatorKind::SafeLog => x.iter_mut().for_each(|v| *v = safe_log(*v)),
            OperatorKind::SafeSqrt => x.iter_mut().for_each(|v| *v = safe_sqrt(*v)),
            OperatorKind::Square => x.iter_mut().for_each(|v| *v *= *v),
            OperatorKind::SafeReciprocal => x.iter_mut().for_each(|v| *v = safe_reciprocal(*v)),
            OperatorKind::Abs => x.iter_mut().for_each(|v| *v = v.abs()),
            OperatorKind::Sin => x.iter_mut().for_each(|v| *v = v.sin()),
            OperatorKind::Cos => x.iter_mut().for_each(|v| *v = v.cos()),
            OperatorKind::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            OperatorKind::Standardize => standardize(x),
            OperatorKind::MinmaxScale => minmax_scale(x),
            _ => panic!("{} is binary", self.name()),
        }
    }

    /// `a <- op(a, b)` elementwise.
    pub fn apply_binary(self, a: &mut [f64], b: &[f64]) {
        let f: fn(f64, f64) -> f64 = match self {
            OperatorKind::Add => |x, y| x + y,
            OperatorKind::Subtract => |x, y| x - y,
            OperatorKind::Multiply => |x, y| x * y,
            OperatorKind::SafeDivide => safe_divide,
            _ => panic!("{} is unary", self.name()),
        };
        a.iter_mut().zip(b).for_each(|(x, &y)| *x = f(*x, y));
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// One entry of the operator registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operator {
    pub kind: OperatorKind,
    pub name: &'static str,
    pub symbol: &'static str,
    pub arity: Arity,
}

pub fn operator_registry() -> Vec<Operator> {
    OperatorKind::ALL
        .iter()
        .map(|&kind| Operator {
            kind,
            name: kind.name(),
            symbol: kind.symbol(),
            arity: kind.arity(),
        })
        .collect()
}

pub fn safe_log(x: f64) -> f64 {
    (x.abs() + SAFE_EPS).ln()
}

pub fn safe_sqrt(x: f64) -> f64 {
    x.abs().sqrt()
}

/// `a / (b + sign(b) * 1e-8)` with `sign(0) = +1`.
pub fn safe_divide(a: f64, b: f64) -> f64 {
    let sign = if b < 0.0 { -1.0 } else { 1.0 };
    a / (b + sign * SAFE_EPS)
}

pub fn safe_reciprocal(x: f64) -> f64 {
    safe_divide(1.0, x)
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    if x.is_empty() {
        return;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    x.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

fn minmax_scale(x: &mut [f64]) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    x.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Operand or operator inside one expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RpnItem {
    Feature(usize),
    Op(OperatorKind),
}

impl fmt::Display for RpnItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpnItem::Feature(i) => write!(f, "f{i}"),
            RpnItem::Op(op) => write!(f, "{op}"),
        }
    }
}

/// Any token of a serialized feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Sos,
    Sep,
    Eos,
    Item(RpnItem),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Sos => f.write_str(SOS),
            Token::Sep => f.write_str(SEP),
            Token::Eos => f.write_str(EOS),
            Token::Item(item) => item.fmt(f),
        }
    }
}

/// How `f<n>` names map to column indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexBase {
    /// `f0` is the first column. Used by [`serialize`].
    #[default]
    Zero,
    /// `f1` is the first column, as in hand-written examples.
    One,
}

fn parse_feature(token: &str, base: IndexBase) -> Option<usize> {
    let digits = token.strip_prefix('f')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    let n: usize = digits.parse().ok()?;
    match base {
        IndexBase::Zero => Some(n),
        IndexBase::One => n.checked_sub(1),
    }
}

/// Parses one token that may appear inside an expression.
pub fn parse_item(token: &str, base: IndexBase) -> Option<RpnItem> {
    parse_feature(token, base)
        .map(RpnItem::Feature)
        .or_else(|| OperatorKind::from_token(token).map(RpnItem::Op))
}

/// Runs the stack-depth check over `items`. On failure returns the offending
/// offset (`items.len()` for an unbalanced end) and the fault.
pub fn check_stack(items: &[RpnItem]) -> Result<(), (usize, RpnFault)> {
    let mut depth = 0usize;
    for (i, item) in items.iter().enumerate() {
        match item {
            RpnItem::Feature(_) => depth += 1,
            RpnItem::Op(op) => {
                let need = op.arity().operands();
                if depth < need {
                    return Err((i, RpnFault::Underflow));
                }
                depth = depth - need + 1;
            }
        }
    }
    if depth != 1 {
        return Err((items.len(), RpnFault::Unbalanced { depth }));
    }
    Ok(())
}

/// A stack-valid postfix expression over original columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureExpr {
    items: Vec<RpnItem>,
}

impl FeatureExpr {
    pub fn new(items: Vec<RpnItem>) -> Result<Self, ExprError> {
        check_stack(&items).map_err(|(position, fault)| ExprError::MalformedRpn {
            position,
            token: items
                .get(position)
                .map(ToString::to_string)
                .unwrap_or_else(|| "<end>".into()),
            fault,
        })?;
        Ok(Self { items })
    }

    pub fn feature(index: usize) -> Self {
        Self {
            items: vec![RpnItem::Feature(index)],
        }
    }

    pub fn unary(op: OperatorKind, arg: &FeatureExpr) -> Self {
        assert_eq!(op.arity(), Arity::Unary);
        let mut items = arg.items.clone();
        items.push(RpnItem::Op(op));
        Self { items }
    }

    pub fn binary(op: OperatorKind, lhs: &FeatureExpr, rhs: &FeatureExpr) -> Self {
        assert_eq!(op.arity(), Arity::Binary);
        let mut items = lhs.items.clone();
        items.extend_from_slice(&rhs.items);
        items.push(RpnItem::Op(op));
        Self { items }
    }

    pub fn items(&self) -> &[RpnItem] {
        &self.items
    }

    /// Largest referenced column index.
    pub fn max_feature(&self) -> Option<usize> {
        self.items
            .iter()
            .filter_map(|i| match i {
                RpnItem::Feature(f) => Some(*f),
                RpnItem::Op(_) => None,
            })
            .max()
    }
}

impl fmt::Display for FeatureExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            item.fmt(f)?;
        }
        Ok(())
    }
}

/// A non-empty ordered list of expressions; one generated column each.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureSetSequence {
    exprs: Vec<FeatureExpr>,
}

impl FeatureSetSequence {
    pub fn new(exprs: Vec<FeatureExpr>) -> Result<Self, ExprError> {
        if exprs.is_empty() {
            return Err(ExprError::EmptySequence);
        }
        Ok(Self { exprs })
    }

    /// Passthrough of columns `0..k`.
    pub fn identity(k: usize) -> Result<Self, ExprError> {
        Self::new((0..k).map(FeatureExpr::feature).collect())
    }

    pub fn exprs(&self) -> &[FeatureExpr] {
        &self.exprs
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn push(&mut self, expr: FeatureExpr) {
        self.exprs.push(expr);
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut out = vec![Token::Sos];
        for e in &self.exprs {
            out.extend(e.items.iter().copied().map(Token::Item));
            out.push(Token::Sep);
        }
        out.push(Token::Eos);
        out
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.exprs.iter().filter_map(FeatureExpr::max_feature).max()
    }
}

impl fmt::Display for FeatureSetSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

/// Canonical single-space token string.
pub fn serialize(seq: &FeatureSetSequence) -> String {
    seq.tokens()
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits on whitespace, also detaching `<SOS>`/`<SEP>`/`<EOS>` markers that
/// are glued to neighbouring tokens.
pub fn tokenize(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in s.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let next = [SOS, SEP, EOS]
                .iter()
                .filter_map(|m| rest.find(m).map(|i| (i, *m)))
                .min_by_key(|(i, _)| *i);
            match next {
                Some((0, m)) => {
                    out.push(&rest[..m.len()]);
                    rest = &rest[m.len()..];
                }
                Some((i, _)) => {
                    out.push(&rest[..i]);
                    rest = &rest[i..];
                }
                None => {
                    out.push(rest);
                    rest = "";
                }
            }
        }
    }
    out
}

pub fn parse(token_string: &str) -> Result<FeatureSetSequence, ExprError> {
    parse_with_base(token_string, IndexBase::Zero)
}

pub fn parse_with_base(token_string: &str, base: IndexBase) -> Result<FeatureSetSequence, ExprError> {
    let tokens = tokenize(token_string);
    if tokens.first() != Some(&SOS) {
        return Err(ExprError::Framing(format!("expected {SOS} first")));
    }
    if tokens.last() != Some(&EOS) {
        return Err(ExprError::Framing(format!("expected {EOS} last")));
    }
    if tokens.len() < 3 || tokens[tokens.len() - 2] != SEP {
        return Err(ExprError::Framing(format!("expected {SEP} before {EOS}")));
    }

    let mut exprs = Vec::new();
    let mut items = Vec::new();
    let mut start = 1;
    for (pos, &tok) in tokens.iter().enumerate().take(tokens.len() - 1).skip(1) {
        if tok == SEP {
            check_stack(&items).map_err(|(offset, fault)| ExprError::MalformedRpn {
                position: start + offset,
                token: tokens[start + offset].to_string(),
                fault,
            })?;
            exprs.push(FeatureExpr {
                items: std::mem::take(&mut items),
            });
            start = pos + 1;
        } else if tok == SOS || tok == EOS {
            return Err(ExprError::Framing(format!("{tok} at position {pos}")));
        } else {
            let item = parse_item(tok, base).ok_or_else(|| ExprError::UnknownToken {
                token: tok.to_string(),
                position: pos,
            })?;
            items.push(item);
        }
    }
    FeatureSetSequence::new(exprs)
}

/// Result of evaluating one expression over a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: Array1<f64>,
    /// Cells that went non-finite at some operator and were reset to 0.
    pub nonfinite: usize,
}

fn sanitize(x: &mut [f64]) -> usize {
    let mut n = 0;
    for v in x.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
            n += 1;
        }
    }
    n
}

/// Columnwise stack evaluation of one expression.
pub fn evaluate(expr: &FeatureExpr, matrix: ArrayView2<'_, f64>) -> Result<Evaluation, ExprError> {
    let columns = matrix.ncols();
    if let Some(index) = expr.max_feature().filter(|&m| m >= columns) {
        return Err(ExprError::FeatureOutOfRange { index, columns });
    }
    let mut nonfinite = 0;
    let mut stack: Vec<Vec<f64>> = Vec::with_capacity(4);
    for item in &expr.items {
        match *item {
            RpnItem::Feature(j) => {
                let mut col = matrix.column(j).to_vec();
                nonfinite += sanitize(&mut col);
                stack.push(col);
            }
            RpnItem::Op(op) => match op.arity() {
                Arity::Unary => {
                    let top = stack.last_mut().expect("validated expression");
                    op.apply_unary(top);
                    nonfinite += sanitize(top);
                }
                Arity::Binary => {
                    let rhs = stack.pop().expect("validated expression");
                    let lhs = stack.last_mut().expect("validated expression");
                    op.apply_binary(lhs, &rhs);
                    nonfinite += sanitize(lhs);
                }
            },
        }
    }
    let values = stack.pop().expect("validated expression");
    Ok(Evaluation {
        values: Array1::from(values),
        nonfinite,
    })
}

/// Evaluates every expression of `seq` against `d`, returning the new dataset
/// and the total count of reset non-finite cells.
pub fn materialize_counted(
    seq: &FeatureSetSequence,
    d: &Dataset,
) -> Result<(Dataset, usize), ExprError> {
    let rows = d.n_rows();
    let mut matrix = Array2::<f64>::zeros((rows, seq.len()));
    let mut names = Vec::with_capacity(seq.len());
    let mut nonfinite = 0;
    let mut seen = std::collections::HashMap::<String, usize>::new();
    for (j, expr) in seq.exprs().iter().enumerate() {
        let ev = evaluate(expr, d.matrix().view())?;
        nonfinite += ev.nonfinite;
        matrix.column_mut(j).assign(&ev.values);
        let name = expr.to_string();
        let count = seen.entry(name.clone()).or_insert(0);
        *count += 1;
        names.push(if *count == 1 {
            name
        } else {
            format!("{name} #{count}")
        });
    }
    Ok((d.with_features(matrix, names)?, nonfinite))
}

/// New dataset whose columns are the evaluated expressions of `seq`.
pub fn materialize(seq: &FeatureSetSequence, d: &Dataset) -> Result<Dataset, ExprError> {
    materialize_counted(seq, d).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn registry_contents() {
        let reg = operator_registry();
        assert_eq!(reg.len(), 14);
        let find = |n: &str| reg.iter().find(|o| o.name == n).unwrap();
        assert_eq!(find("add").arity, Arity::Binary);
        assert_eq!(find("safe_log").arity, Arity::Unary);
        let binary = reg.iter().filter(|o| o.arity == Arity::Binary).count();
        assert_eq!(binary, 4);
        let mut symbols: Vec<_> = reg.iter().map(|o| o.symbol).collect();
        symbols.sort_unstable();
        symbols.dedup();
        assert_eq!(symbols.len(), 14);
    }

    #[test]
    fn parse_one_based_example() {
        let seq = parse_with_base("<SOS> f1 f2 + f3 * log <SEP> <EOS>", IndexBase::One).unwrap();
        assert_eq!(seq.len(), 1);
        let want = FeatureExpr::unary(
            OperatorKind::SafeLog,
            &FeatureExpr::binary(
                OperatorKind::Multiply,
                &FeatureExpr::binary(
                    OperatorKind::Add,
                    &FeatureExpr::feature(0),
                    &FeatureExpr::feature(1),
                ),
                &FeatureExpr::feature(2),
            ),
        );
        assert_eq!(seq.exprs()[0], want);
        // glued markers as written in running text
        let glued = parse_with_base("<SOS>f1 f2 + f3 * log<SEP><EOS>", IndexBase::One).unwrap();
        assert_eq!(glued, seq);
    }

    #[test]
    fn parse_single_feature() {
        let seq = parse("<SOS> f1 <SEP> <EOS>").unwrap();
        assert_eq!(seq.exprs(), &[FeatureExpr::feature(1)]);
    }

    #[test]
    fn parse_underflow_reports_position() {
        let err = parse("<SOS> f1 + <SEP> <EOS>").unwrap_err();
        assert_eq!(
            err,
            ExprError::MalformedRpn {
                position: 2,
                token: "+".into(),
                fault: RpnFault::Underflow
            }
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse("<SOS> f1 f2 <SEP> <EOS>"),
            Err(ExprError::MalformedRpn { fault: RpnFault::Unbalanced { depth: 2 }, .. })
        ));
        assert!(matches!(
            parse("<SOS> <SEP> <EOS>"),
            Err(ExprError::MalformedRpn { fault: RpnFault::Unbalanced { depth: 0 }, .. })
        ));
        assert!(matches!(
            parse("<SOS> f1 pow <SEP> <EOS>"),
            Err(ExprError::UnknownToken { position: 2, .. })
        ));
        assert!(matches!(parse("f1 <SEP> <EOS>"), Err(ExprError::Framing(_))));
        assert!(matches!(parse("<SOS> f1 <SEP>"), Err(ExprError::Framing(_))));
        assert!(matches!(parse("<SOS> f1 <EOS>"), Err(ExprError::Framing(_))));
        assert!(matches!(parse("<SOS> <EOS>"), Err(ExprError::Framing(_))));
        assert!(matches!(
            parse("<SOS> f1 <SOS> <SEP> <EOS>"),
            Err(ExprError::Framing(_))
        ));
        assert!(matches!(
            parse_with_base("<SOS> f0 <SEP> <EOS>", IndexBase::One),
            Err(ExprError::UnknownToken { .. })
        ));
    }

    #[test]
    fn operator_names_are_aliases() {
        let a = parse("<SOS> f0 f1 add <SEP> <EOS>").unwrap();
        let b = parse("<SOS> f0 f1 + <SEP> <EOS>").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn serialize_framing() {
        let add = FeatureExpr::binary(
            OperatorKind::Add,
            &FeatureExpr::feature(1),
            &FeatureExpr::feature(2),
        );
        let seq = FeatureSetSequence::new(vec![add]).unwrap();
        assert_eq!(serialize(&seq), "<SOS> f1 f2 + <SEP> <EOS>");

        let two = FeatureSetSequence::new(vec![
            FeatureExpr::feature(1),
            FeatureExpr::unary(OperatorKind::Square, &FeatureExpr::feature(2)),
        ])
        .unwrap();
        assert_eq!(serialize(&two), "<SOS> f1 <SEP> f2 square <SEP> <EOS>");
        assert_eq!(FeatureSetSequence::new(vec![]), Err(ExprError::EmptySequence));
    }

    #[test]
    fn evaluate_examples() {
        let m = array![[1.0, 3.0], [2.0, 4.0]];
        let e = parse("<SOS> f0 f1 + <SEP> <EOS>").unwrap();
        assert_eq!(evaluate(&e.exprs()[0], m.view()).unwrap().values.to_vec(), vec![4.0, 6.0]);

        let row = array![[1.0, 2.0, 3.0]];
        let e = parse("<SOS> f0 f1 + f2 * log <SEP> <EOS>").unwrap();
        let v = evaluate(&e.exprs()[0], row.view()).unwrap().values[0];
        assert!((v - (9.0f64 + 1e-8).ln()).abs() < 1e-12);
        assert!((v - 2.1972).abs() < 1e-4);

        let row = array![[1.0, 0.0]];
        let e = parse("<SOS> f0 f1 / <SEP> <EOS>").unwrap();
        let v = evaluate(&e.exprs()[0], row.view()).unwrap().values[0];
        assert!((v - 1e8).abs() < 1e-6);
    }

    #[test]
    fn evaluate_out_of_range() {
        let m = array![[1.0, 3.0]];
        let e = FeatureExpr::feature(2);
        assert_eq!(
            evaluate(&e, m.view()),
            Err(ExprError::FeatureOutOfRange { index: 2, columns: 2 })
        );
    }

    #[test]
    fn guarded_math() {
        assert_eq!(safe_divide(1.0, -0.0), 1.0 / 1e-8);
        assert_eq!(safe_divide(2.0, -1.0), 2.0 / (-1.0 - 1e-8));
        assert_eq!(safe_sqrt(-4.0), 2.0);
        assert_eq!(safe_log(0.0), (1e-8f64).ln());
        let mut constant = vec![3.0, 3.0, 3.0];
        OperatorKind::Standardize.apply_unary(&mut constant);
        assert_eq!(constant, vec![0.0; 3]);
        let mut constant = vec![3.0, 3.0];
        OperatorKind::MinmaxScale.apply_unary(&mut constant);
        assert_eq!(constant, vec![0.0; 2]);
        let mut x = vec![1.0, 2.0, 3.0];
        OperatorKind::MinmaxScale.apply_unary(&mut x);
        assert_eq!(x, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn overflow_is_reset_and_counted() {
        let m = array![[1e200], [2.0]];
        let e = FeatureExpr::unary(
            OperatorKind::Square,
            &FeatureExpr::unary(OperatorKind::Square, &FeatureExpr::feature(0)),
        );
        let ev = evaluate(&e, m.view()).unwrap();
        assert_eq!(ev.values.to_vec(), vec![0.0, 16.0]);
        assert_eq!(ev.nonfinite, 1);
    }

    #[test]
    fn materialize_shapes() {
        let d = Dataset::new(
            array![[1.0, 2.0], [3.0, 5.0], [0.5, 0.25]],
            vec!["a".into(), "b".into()],
            vec![0.0, 1.0, 0.0],
            vec![0, 1, 1],
            crate::data::TaskKind::Classification,
            "t",
        )
        .unwrap();
        let id = materialize(&FeatureSetSequence::identity(2).unwrap(), &d).unwrap();
        assert_eq!(id.matrix(), d.matrix());
        assert_eq!(id.feature_names(), &["f0".to_string(), "f1".to_string()]);

        let add = parse("<SOS> f0 f1 + <SEP> <EOS>").unwrap();
        let m = materialize(&add, &d).unwrap();
        assert_eq!(m.n_features(), 1);
        assert_eq!(m.target(), d.target());
        assert_eq!(m.sensitive(), d.sensitive());

        let dup = parse("<SOS> f0 <SEP> f0 <SEP> <EOS>").unwrap();
        let m = materialize(&dup, &d).unwrap();
        assert_eq!(m.feature_names(), &["f0".to_string(), "f0 #2".to_string()]);
    }
}
