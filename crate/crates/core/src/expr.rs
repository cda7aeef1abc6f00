//! Binary contraction expressions in index notation.
//!
//! `R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]` contracts `b` and `g` and keeps
//! `a` and `e`. A leading `+` marks an upper index, `-` a lower one. The
//! output term fixes the mode order of the result.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::tensor::{Tensor, Variance};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Index {
    pub label: String,
    pub variance: Variance,
}

/// A named tensor with its index list, e.g. `A[+a,-b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorTerm {
    pub name: String,
    pub indices: Vec<Index>,
}

impl TensorTerm {
    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn labels(&self) -> impl DoubleEndedIterator<Item = &str> + ExactSizeIterator {
        self.indices.iter().map(|i| i.label.as_str())
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.indices.iter().position(|i| i.label == label)
    }

    pub fn variances(&self) -> Vec<Variance> {
        self.indices.iter().map(|i| i.variance).collect()
    }
}

impl fmt::Display for TensorTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.name)?;
        for (i, idx) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}{}", idx.variance.symbol(), idx.label)?;
        }
        f.write_str("]")
    }
}

/// How contracted index pairs are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckMode {
    /// Contracted pairs must be one upper and one lower index; free indices
    /// keep their variance in the output.
    #[default]
    Strict,
    /// Labels are matched by name only.
    Positional,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("label `{0}` appears more than twice in the operands")]
    TooManyOccurrences(String),
    #[error("label `{label}` repeated within `{tensor}`; traces are not supported")]
    RepeatedInOperand { label: String, tensor: String },
    #[error("output label `{0}` repeated")]
    RepeatedInOutput(String),
    #[error("contracted label `{0}` pairs two indices of the same variance")]
    SameVariance(String),
    #[error("free label `{0}` changes variance between operand and output")]
    FreeVarianceChanged(String),
    #[error("free label `{0}` is missing from the output")]
    MissingFree(String),
    #[error("contracted label `{0}` must not appear in the output")]
    ContractedInOutput(String),
    #[error("output label `{0}` does not appear in either operand")]
    UnknownOutput(String),
    #[error("the operands share no label; at least one contracted pair is required")]
    NoContraction,
}

/// A parsed and structurally checked binary contraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionSpec {
    output: TensorTerm,
    left: TensorTerm,
    right: TensorTerm,
    mode: CheckMode,
    contracted: Vec<String>,
}

impl ContractionSpec {
    pub fn output(&self) -> &TensorTerm {
        &self.output
    }

    pub fn left(&self) -> &TensorTerm {
        &self.left
    }

    pub fn right(&self) -> &TensorTerm {
        &self.right
    }

    pub fn check_mode(&self) -> CheckMode {
        self.mode
    }

    /// Contracted labels in the order they appear in the left operand.
    pub fn contracted(&self) -> &[String] {
        &self.contracted
    }

    pub fn is_contracted(&self, label: &str) -> bool {
        self.contracted.iter().any(|c| c == label)
    }

    /// Number of contracted pairs.
    pub fn p(&self) -> usize {
        self.contracted.len()
    }

    pub fn free_left(&self) -> Vec<String> {
        self.left
            .labels()
            .filter(|l| !self.is_contracted(l))
            .map(str::to_string)
            .collect()
    }

    pub fn free_right(&self) -> Vec<String> {
        self.right
            .labels()
            .filter(|l| !self.is_contracted(l))
            .map(str::to_string)
            .collect()
    }

    /// Rank minus number of contracted pairs, for the left and right operand.
    pub fn deltas(&self) -> (usize, usize) {
        (self.left.rank() - self.p(), self.right.rank() - self.p())
    }

    /// Every label, left operand order first, then the right operand's free labels.
    pub fn all_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.left.labels().map(str::to_string).collect();
        out.extend(self.free_right());
        out
    }
}

impl fmt::Display for ContractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} * {}", self.output, self.left, self.right)
    }
}

impl std::str::FromStr for ContractionSpec {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s, CheckMode::Strict)
    }
}

pub fn parse(text: &str, mode: CheckMode) -> Result<ContractionSpec, ParseError> {
    let mut p = Parser {
        chars: text.chars().collect(),
        pos: 0,
    };
    let output = p.term()?;
    p.expect('=')?;
    let left = p.term()?;
    p.expect('*')?;
    let right = p.term()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error("unexpected trailing input"));
    }
    check(output, left, right, mode)
}

fn check(output: TensorTerm, left: TensorTerm, right: TensorTerm, mode: CheckMode) -> Result<ContractionSpec, ParseError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in left.labels().chain(right.labels()) {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c > 2) {
        return Err(ParseError::TooManyOccurrences(l.to_string()));
    }
    for term in [&left, &right] {
        let mut seen = BTreeSet::new();
        for l in term.labels() {
            if !seen.insert(l) {
                return Err(ParseError::RepeatedInOperand {
                    label: l.to_string(),
                    tensor: term.name.clone(),
                });
            }
        }
    }
    let mut seen = BTreeSet::new();
    for l in output.labels() {
        if !seen.insert(l) {
            return Err(ParseError::RepeatedInOutput(l.to_string()));
        }
    }

    let contracted: Vec<String> = left
        .labels()
        .filter(|l| right.position(l).is_some())
        .map(str::to_string)
        .collect();
    if contracted.is_empty() {
        return Err(ParseError::NoContraction);
    }

    for c in &contracted {
        if output.position(c).is_some() {
            return Err(ParseError::ContractedInOutput(c.clone()));
        }
        if mode == CheckMode::Strict {
            let lv = left.indices[left.position(c).unwrap()].variance;
            let rv = right.indices[right.position(c).unwrap()].variance;
            if lv == rv {
                return Err(ParseError::SameVariance(c.clone()));
            }
        }
    }
    for idx in &output.indices {
        let source = left
            .position(&idx.label)
            .map(|p| &left.indices[p])
            .or_else(|| right.position(&idx.label).map(|p| &right.indices[p]))
            .ok_or_else(|| ParseError::UnknownOutput(idx.label.clone()))?;
        if mode == CheckMode::Strict && source.variance != idx.variance {
            return Err(ParseError::FreeVarianceChanged(idx.label.clone()));
        }
    }
    for term in [&left, &right] {
        for l in term.labels() {
            if !contracted.iter().any(|c| c == l) && output.position(l).is_none() {
                return Err(ParseError::MissingFree(l.to_string()));
            }
        }
    }

    Ok(ContractionSpec {
        output,
        left,
        right,
        mode,
        contracted,
    })
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => Err(self.error(format!("expected `{c}`, found `{got}`"))),
            None => Err(self.error(format!("expected `{c}`, found end of input"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .chars
            .get(self.pos)
            .is_some_and(|c| c.is_alphanumeric() || *c == '_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(format!("expected {what}")));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn term(&mut self) -> Result<TensorTerm, ParseError> {
        let name = self.ident("tensor name")?;
        self.expect('[')?;
        let mut indices = Vec::new();
        if self.peek() == Some(']') {
            self.pos += 1;
            return Ok(TensorTerm { name, indices });
        }
        loop {
            let variance = match self.peek().and_then(Variance::from_symbol) {
                Some(v) => {
                    self.pos += 1;
                    v
                }
                None => return Err(self.error("expected `+` or `-` before index label")),
            };
            let label = self.ident("index label")?;
            indices.push(Index { label, variance });
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(']') => {
                    self.pos += 1;
                    return Ok(TensorTerm { name, indices });
                }
                _ => return Err(self.error("expected `,` or `]`")),
            }
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("tensor `{tensor}` has rank {got}, expression expects {expected}")]
    RankMismatch {
        tensor: String,
        expected: usize,
        got: usize,
    },
    #[error("label `{label}` has extent {left} in the left operand and {right} in the right")]
    ExtentMismatch { label: String, left: usize, right: usize },
    #[error("tensor `{tensor}` mode {mode} is {got:?}, expression says {expected:?}")]
    VarianceMismatch {
        tensor: String,
        mode: usize,
        expected: Variance,
        got: Variance,
    },
    #[error("no extent given for label `{0}`")]
    MissingExtent(String),
    #[error("extent for label `{0}` must be positive")]
    ZeroExtent(String),
    #[error("extent given for unknown label `{0}`")]
    UnknownLabel(String),
}

/// A contraction together with the extent of every label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedContraction {
    spec: ContractionSpec,
    extents: BTreeMap<String, usize>,
}

impl ValidatedContraction {
    /// Checks operand shapes and variances against the expression.
    pub fn new(spec: &ContractionSpec, left: &Tensor, right: &Tensor) -> Result<Self, ValidationError> {
        let mut extents = BTreeMap::new();
        for (term, t) in [(&spec.left, left), (&spec.right, right)] {
            if term.rank() != t.rank() {
                return Err(ValidationError::RankMismatch {
                    tensor: term.name.clone(),
                    expected: term.rank(),
                    got: t.rank(),
                });
            }
            for (mode, idx) in term.indices.iter().enumerate() {
                if spec.mode == CheckMode::Strict && t.variance()[mode] != idx.variance {
                    return Err(ValidationError::VarianceMismatch {
                        tensor: term.name.clone(),
                        mode,
                        expected: idx.variance,
                        got: t.variance()[mode],
                    });
                }
                let e = t.extents()[mode];
                if let Some(&prev) = extents.get(&idx.label) {
                    if prev != e {
                        return Err(ValidationError::ExtentMismatch {
                            label: idx.label.clone(),
                            left: prev,
                            right: e,
                        });
                    }
                }
                extents.insert(idx.label.clone(), e);
            }
        }
        Ok(ValidatedContraction {
            spec: spec.clone(),
            extents,
        })
    }

    /// Builds from a label-to-extent map, for planning without operand data.
    pub fn from_extents(spec: &ContractionSpec, given: &BTreeMap<String, usize>) -> Result<Self, ValidationError> {
        let labels = spec.all_labels();
        if let Some(unknown) = given.keys().find(|k| !labels.contains(k)) {
            return Err(ValidationError::UnknownLabel(unknown.clone()));
        }
        let mut extents = BTreeMap::new();
        for l in labels {
            let &e = given.get(&l).ok_or_else(|| ValidationError::MissingExtent(l.clone()))?;
            if e == 0 {
                return Err(ValidationError::ZeroExtent(l));
            }
            extents.insert(l, e);
        }
        Ok(ValidatedContraction {
            spec: spec.clone(),
            extents,
        })
    }

    pub fn spec(&self) -> &ContractionSpec {
        &self.spec
    }

    pub fn extents(&self) -> &BTreeMap<String, usize> {
        &self.extents
    }

    pub fn extent(&self, label: &str) -> usize {
        self.extents[label]
    }

    pub fn term_extents(&self, term: &TensorTerm) -> Vec<usize> {
        term.labels().map(|l| self.extents[l]).collect()
    }

    pub fn left_extents(&self) -> Vec<usize> {
        self.term_extents(&self.spec.left)
    }

    pub fn right_extents(&self) -> Vec<usize> {
        self.term_extents(&self.spec.right)
    }

    pub fn output_extents(&self) -> Vec<usize> {
        self.term_extents(&self.spec.output)
    }

    pub fn deltas(&self) -> (usize, usize) {
        self.spec.deltas()
    }

    /// Multiply-add pairs counted as two operations each:
    /// `2 * prod(free extents) * prod(contracted extents)`.
    pub fn flop_count(&self) -> u64 {
        self.extents
            .values()
            .try_fold(2u64, |acc, &e| acc.checked_mul(e as u64))
            .unwrap_or(u64::MAX)
    }

    /// Checks that tensors still match the recorded extents.
    pub fn check_operands(&self, left: &Tensor, right: &Tensor) -> Result<(), ValidationError> {
        let again = ValidatedContraction::new(&self.spec, left, right)?;
        for (label, &e) in &again.extents {
            let want = self.extents[label];
            if want != e {
                return Err(ValidationError::ExtentMismatch {
                    label: label.clone(),
                    left: want,
                    right: e,
                });
            }
        }
        Ok(())
    }
}
