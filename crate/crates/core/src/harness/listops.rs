//! ListOps expressions: generation, evaluation, vocabulary and TSV I/O.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 10;
/// Embedding table size used by ListOps models.
pub const VOCAB_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Max,
    Min,
    Med,
    SumMod,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Max, Operator::Min, Operator::Med, Operator::SumMod];

    fn token(self) -> &'static str {
        match self {
            Operator::Max => "[MAX",
            Operator::Min => "[MIN",
            Operator::Med => "[MED",
            Operator::SumMod => "[SM",
        }
    }

    /// Median takes the lower of the two middle values for even arity.
    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            Operator::Max => *args.iter().max().expect("operator has arguments"),
            Operator::Min => *args.iter().min().expect("operator has arguments"),
            Operator::Med => {
                let mut sorted = args.to_vec();
                sorted.sort_unstable();
                sorted[(sorted.len() - 1) / 2]
            }
            Operator::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Apply(Operator, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => op.apply(&args.iter().map(Expr::eval).collect::<Vec<_>>()),
        }
    }

    /// Operator nesting depth; a bare digit has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn num_tokens(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Apply(_, args) => 2 + args.iter().map(Expr::num_tokens).sum::<usize>(),
        }
    }

    fn push_tokens<'a>(&self, out: &mut Vec<&'a str>) {
        const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
        match self {
            Expr::Digit(d) => out.push(DIGITS[*d as usize]),
            Expr::Apply(op, args) => {
                out.push(op.token());
                for a in args {
                    a.push_tokens(out);
                }
                out.push("]");
            }
        }
    }

    pub fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::with_capacity(self.num_tokens());
        self.push_tokens(&mut out);
        out
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

/// Id of a source token. `(` and `)` appear in benchmark files and are kept.
pub fn token_id(token: &str) -> Option<usize> {
    Some(match token {
        "<pad>" => 0,
        "[MAX" => 11,
        "[MIN" => 12,
        "[MED" => 13,
        "[SM" | "[SUM_MOD" => 14,
        "]" => 15,
        "(" => 16,
        ")" => 17,
        d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => 1 + (d.as_bytes()[0] - b'0') as usize,
        _ => return None,
    })
}

/// Splits a source string into tokens, detaching closing brackets.
pub fn split_tokens(source: &str) -> Vec<String> {
    source
        .replace(']', " ] ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn tokenize(source: &str) -> Result<Vec<usize>> {
    split_tokens(source)
        .iter()
        .map(|t| token_id(t).ok_or_else(|| Error::Data(format!("unknown token '{t}'"))))
        .collect()
}

/// Parses a source string into an expression (parentheses are ignored).
pub fn parse(source: &str) -> Result<Expr> {
    fn operator(tok: &str) -> Option<Operator> {
        match tok {
            "[MAX" => Some(Operator::Max),
            "[MIN" => Some(Operator::Min),
            "[MED" => Some(Operator::Med),
            "[SM" | "[SUM_MOD" => Some(Operator::SumMod),
            _ => None,
        }
    }
    fn expr(toks: &[String], pos: &mut usize) -> Result<Expr> {
        let tok = toks
            .get(*pos)
            .ok_or_else(|| Error::Data("unexpected end of expression".into()))?;
        *pos += 1;
        if let Some(op) = operator(tok) {
            let mut args = Vec::new();
            loop {
                match toks.get(*pos).map(String::as_str) {
                    Some("]") => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => args.push(expr(toks, pos)?),
                    None => return Err(Error::Data("unclosed operator".into())),
                }
            }
            if args.is_empty() {
                return Err(Error::Data(format!("{tok} has no arguments")));
            }
            Ok(Expr::Apply(op, args))
        } else {
            match tok.parse::<u8>() {
                Ok(d) if d < 10 => Ok(Expr::Digit(d)),
                _ => Err(Error::Data(format!("unexpected token '{tok}'"))),
            }
        }
    }
    let toks: Vec<String> = split_tokens(source)
        .into_iter()
        .filter(|t| t != "(" && t != ")")
        .collect();
    let mut pos = 0;
    let e = expr(&toks, &mut pos)?;
    if pos != toks.len() {
        return Err(Error::Data(format!("trailing tokens after position {pos}")));
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListOpsSample {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Sampling parameters of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub max_len: usize,
    pub max_depth: usize,
    #[serde(default = "default_min_arity")]
    pub min_arity: usize,
    #[serde(default = "default_max_arity")]
    pub max_arity: usize,
    /// Chance that a non-root argument is a digit rather than a nested operator.
    #[serde(default = "default_leaf_prob")]
    pub leaf_prob: f64,
}

fn default_min_arity() -> usize {
    2
}
fn default_max_arity() -> usize {
    5
}
fn default_leaf_prob() -> f64 {
    0.65
}

impl GeneratorSpec {
    pub fn new(max_len: usize, max_depth: usize) -> Self {
        Self {
            max_len,
            max_depth,
            min_arity: default_min_arity(),
            max_arity: default_max_arity(),
            leaf_prob: default_leaf_prob(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.max_depth == 0 {
            return Err(Error::Config("max_len and max_depth must be at least 1".into()));
        }
        if self.min_arity == 0 || self.min_arity > self.max_arity {
            return Err(Error::Config("arity range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.leaf_prob) {
            return Err(Error::Config("leaf_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn sample_expr(rng: &mut impl Rng, spec: &GeneratorSpec, depth: usize) -> Expr {
    let leaf = depth >= spec.max_depth || (depth > 0 && rng.gen_bool(spec.leaf_prob));
    if leaf {
        return Expr::Digit(rng.gen_range(0..10));
    }
    let op = Operator::ALL[rng.gen_range(0..4)];
    let arity = rng.gen_range(spec.min_arity..=spec.max_arity);
    Expr::Apply(op, (0..arity).map(|_| sample_expr(rng, spec, depth + 1)).collect())
}

/// Draws one expression that fits in `max_len` tokens.
pub fn sample_expression(rng: &mut impl Rng, spec: &GeneratorSpec) -> Expr {
    loop {
        let e = sample_expr(rng, spec, 0);
        if e.num_tokens() <= spec.max_len {
            return e;
        }
        if spec.max_len < 2 + spec.min_arity {
            return Expr::Digit(rng.gen_range(0..10));
        }
    }
}

/// `n` labelled samples, deterministic in `(spec, seed)`.
pub fn listops_generate(n: usize, spec: &GeneratorSpec, seed: u64) -> Result<Vec<ListOpsSample>> {
    spec.validate()?;
    let mut rng = substream(seed, "listops");
    Ok((0..n)
        .map(|_| {
            let e = sample_expression(&mut rng, spec);
            ListOpsSample {
                ids: e.tokens().iter().map(|t| token_id(t).expect("generated token")).collect(),
                label: e.eval() as usize,
            }
        })
        .collect())
}

/// Same as [`listops_generate`] but keeps the source strings.
pub fn listops_generate_sources(n: usize, spec: &GeneratorSpec, seed: u64) -> Result<Vec<(String, usize)>> {
    spec.validate()?;
    let mut rng = substream(seed, "listops");
    Ok((0..n)
        .map(|_| {
            let e = sample_expression(&mut rng, spec);
            (e.to_string(), e.eval() as usize)
        })
        .collect())
}

/// Reads `source<TAB>target` lines; a leading `Source\tTarget` header is skipped.
pub fn load_lra_tsv(path: &Path) -> Result<Vec<ListOpsSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        log::warn!("{} is empty", path.display());
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let at = |msg: String| Error::Data(format!("{}:{lineno}: {msg}", path.display()));
        if line.trim().is_empty() || (i == 0 && line.trim_start().starts_with("Source")) {
            continue;
        }
        let (source, target) = line
            .rsplit_once('\t')
            .ok_or_else(|| at("expected source<TAB>target".into()))?;
        let label: usize = target
            .trim()
            .parse()
            .ok()
            .filter(|&l| l < NUM_CLASSES)
            .ok_or_else(|| at(format!("bad label '{}'", target.trim())))?;
        let ids = tokenize(source).map_err(|e| at(e.to_string()))?;
        if ids.is_empty() {
            return Err(at("empty source".into()));
        }
        out.push(ListOpsSample { ids, label });
    }
    Ok(out)
}

/// Writes samples in the format read by [`load_lra_tsv`].
pub fn write_lra_tsv(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut text = String::from("Source\tTarget\n");
    for (source, label) in rows {
        text.push_str(&format!("{source}\t{label}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
