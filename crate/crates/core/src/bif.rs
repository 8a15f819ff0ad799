//! Reader and writer for the discrete `.bif` Bayesian-network format.
//!
//! ```text
//! network asia { }
//! variable smoke { type discrete [ 2 ] { yes, no }; }
//! probability ( smoke ) { table 0.5, 0.5; }
//! probability ( lung | smoke ) { (yes) 0.1, 0.9; (no) 0.01, 0.99; }
//! ```
//!
//! Parents are reordered to ascending variable index and every row is
//! renormalized, so the result feeds exact enumeration directly.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, VarMeta};
use crate::scm::{Cgm, Cpd};

/// Rows whose sum is further than this from 1 are rejected.
pub const ROW_SUM_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Punct(char),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1, 1);
    let mut k = 0;
    let advance = |k: &mut usize, line: &mut usize, col: &mut usize| {
        if chars[*k] == '\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
        *k += 1;
    };
    while k < chars.len() {
        let c = chars[k];
        if c.is_whitespace() {
            advance(&mut k, &mut line, &mut col);
        } else if c == '/' && chars.get(k + 1) == Some(&'/') {
            while k < chars.len() && chars[k] != '\n' {
                advance(&mut k, &mut line, &mut col);
            }
        } else if c == '/' && chars.get(k + 1) == Some(&'*') {
            let (l0, c0) = (line, col);
            advance(&mut k, &mut line, &mut col);
            advance(&mut k, &mut line, &mut col);
            loop {
                if k >= chars.len() {
                    return Err(err(l0, c0, "unterminated comment"));
                }
                if chars[k] == '*' && chars.get(k + 1) == Some(&'/') {
                    advance(&mut k, &mut line, &mut col);
                    advance(&mut k, &mut line, &mut col);
                    break;
                }
                advance(&mut k, &mut line, &mut col);
            }
        } else if "{}()[],;|".contains(c) {
            out.push(Token {
                tok: Tok::Punct(c),
                line,
                col,
            });
            advance(&mut k, &mut line, &mut col);
        } else if c.is_alphanumeric() || "_-.+\"'".contains(c) {
            let (l0, c0) = (line, col);
            let mut w = String::new();
            while k < chars.len() && (chars[k].is_alphanumeric() || "_-.+\"'".contains(chars[k])) {
                w.push(chars[k]);
                advance(&mut k, &mut line, &mut col);
            }
            if w == "property" {
                // free-form metadata up to the next ';', ignored
                while k < chars.len() && chars[k] != ';' {
                    advance(&mut k, &mut line, &mut col);
                }
                if k == chars.len() {
                    return Err(err(l0, c0, "unterminated property"));
                }
                advance(&mut k, &mut line, &mut col);
                continue;
            }
            out.push(Token {
                tok: Tok::Word(w.trim_matches(|c| c == '"' || c == '\'').to_string()),
                line: l0,
                col: c0,
            });
        } else {
            return Err(err(line, col, format!("unexpected character '{c}'")));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |t| (t.line, t.col))
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        let (l, c) = self.here();
        Err(err(l, c, msg))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn is_punct(&self, c: char) -> bool {
        self.peek() == Some(&Tok::Punct(c))
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(x)) if x == w)
    }

    fn punct(&mut self, c: char) -> Result<()> {
        if self.is_punct(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(format!("expected '{c}'"))
        }
    }

    fn word(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail("expected a name"),
        }
    }

    fn keyword(&mut self, k: &str) -> Result<()> {
        if self.is_word(k) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(format!("expected '{k}'"))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let (l, c) = self.here();
        let w = self.word()?;
        w.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite() && *x >= 0.0)
            .ok_or_else(|| err(l, c, format!("'{w}' is not a probability")))
    }

    /// Comma-separated names up to (not including) `close`.
    fn name_list(&mut self, close: char) -> Result<Vec<(String, (usize, usize))>> {
        let mut out = Vec::new();
        if self.is_punct(close) {
            return Ok(out);
        }
        loop {
            let at = self.here();
            out.push((self.word()?, at));
            if self.is_punct(',') {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn numbers(&mut self) -> Result<Vec<f64>> {
        let mut out = vec![self.number()?];
        while self.is_punct(',') {
            self.pos += 1;
            out.push(self.number()?);
        }
        Ok(out)
    }
}

struct VarDecl {
    name: String,
    outcomes: Vec<String>,
}

struct ProbBlock {
    target: (String, (usize, usize)),
    parents: Vec<(String, (usize, usize))>,
    table: Option<(Vec<f64>, (usize, usize))>,
    default: Option<(Vec<f64>, (usize, usize))>,
    rows: Vec<(Vec<(String, (usize, usize))>, Vec<f64>, (usize, usize))>,
}

/// A parsed network: its name and the model it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct BifNetwork {
    pub name: String,
    pub cgm: Cgm,
}

/// Parses `.bif` text into a table-based model.
pub fn parse_bif(text: &str) -> Result<Cgm> {
    parse_bif_network(text).map(|n| n.cgm)
}

pub fn parse_bif_network(text: &str) -> Result<BifNetwork> {
    let toks = lex(text)?;
    let end = toks.last().map_or((1, 1), |t| (t.line, t.col + 1));
    let mut p = Parser { toks, pos: 0, end };
    let mut name = String::from("unknown");
    let mut vars: Vec<VarDecl> = Vec::new();
    let mut blocks: Vec<ProbBlock> = Vec::new();
    while p.peek().is_some() {
        if p.is_word("network") {
            p.pos += 1;
            name = p.word()?;
            p.punct('{')?;
            p.punct('}')?;
        } else if p.is_word("variable") {
            p.pos += 1;
            let at = p.here();
            let vname = p.word()?;
            if vars.iter().any(|v| v.name == vname) {
                return Err(err(at.0, at.1, format!("variable '{vname}' declared twice")));
            }
            p.punct('{')?;
            let mut outcomes = None;
            while !p.is_punct('}') {
                p.keyword("type")?;
                let kat = p.here();
                let kind = p.word()?;
                if kind != "discrete" {
                    return Err(err(kat.0, kat.1, format!("unsupported variable type '{kind}'")));
                }
                p.punct('[')?;
                let cat = p.here();
                let k: usize = p
                    .word()?
                    .parse()
                    .map_err(|_| err(cat.0, cat.1, "expected a category count"))?;
                p.punct(']')?;
                p.punct('{')?;
                let labels: Vec<String> = p.name_list('}')?.into_iter().map(|(s, _)| s).collect();
                p.punct('}')?;
                p.punct(';')?;
                if labels.len() != k {
                    return Err(err(cat.0, cat.1, format!("declared {k} categories but listed {}", labels.len())));
                }
                if k < 2 {
                    return Err(err(cat.0, cat.1, "variables need at least 2 categories"));
                }
                outcomes = Some(labels);
            }
            p.punct('}')?;
            let outcomes = outcomes.ok_or_else(|| err(at.0, at.1, format!("variable '{vname}' has no type")))?;
            vars.push(VarDecl { name: vname, outcomes });
        } else if p.is_word("probability") {
            p.pos += 1;
            p.punct('(')?;
            let tat = p.here();
            let target = (p.word()?, tat);
            let parents = if p.is_punct('|') {
                p.pos += 1;
                p.name_list(')')?
            } else {
                Vec::new()
            };
            p.punct(')')?;
            p.punct('{')?;
            let mut block = ProbBlock {
                target,
                parents,
                table: None,
                default: None,
                rows: Vec::new(),
            };
            while !p.is_punct('}') {
                let at = p.here();
                if p.is_word("table") {
                    p.pos += 1;
                    block.table = Some((p.numbers()?, at));
                    p.punct(';')?;
                } else if p.is_word("default") {
                    p.pos += 1;
                    block.default = Some((p.numbers()?, at));
                    p.punct(';')?;
                } else if p.is_punct('(') {
                    p.pos += 1;
                    let vals = p.name_list(')')?;
                    p.punct(')')?;
                    let probs = p.numbers()?;
                    p.punct(';')?;
                    block.rows.push((vals, probs, at));
                } else {
                    return p.fail("expected 'table', 'default', a parent tuple or '}'");
                }
            }
            p.punct('}')?;
            blocks.push(block);
        } else {
            return p.fail("expected 'network', 'variable' or 'probability'");
        }
    }
    build(name, vars, blocks)
}

fn normalize(row: &mut [f64], at: (usize, usize)) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(err(at.0, at.1, format!("probabilities sum to {s}")));
    }
    // rows already within rounding of 1 are left alone so that writing and
    // re-reading is exact
    if (s - 1.0).abs() > 1e-12 {
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(())
}

fn build(name: String, vars: Vec<VarDecl>, blocks: Vec<ProbBlock>) -> Result<BifNetwork> {
    let index: HashMap<&str, usize> = vars.iter().enumerate().map(|(k, v)| (v.name.as_str(), k)).collect();
    let cards: Vec<usize> = vars.iter().map(|v| v.outcomes.len()).collect();
    let lookup = |(s, at): &(String, (usize, usize))| -> Result<usize> {
        index
            .get(s.as_str())
            .copied()
            .ok_or_else(|| err(at.0, at.1, format!("unknown variable '{s}'")))
    };
    let mut cpds: Vec<Option<Cpd>> = vec![None; vars.len()];
    let mut edges = Vec::new();
    for b in &blocks {
        let t = lookup(&b.target)?;
        let at = b.target.1;
        if cpds[t].is_some() {
            return Err(err(at.0, at.1, format!("second probability block for '{}'", vars[t].name)));
        }
        let file_parents: Vec<usize> = b.parents.iter().map(lookup).collect::<Result<_>>()?;
        for (k, &q) in file_parents.iter().enumerate() {
            if q == t || file_parents[..k].contains(&q) {
                let pat = b.parents[k].1;
                return Err(err(pat.0, pat.1, format!("invalid parent '{}'", vars[q].name)));
            }
        }
        let mut parents = file_parents.clone();
        parents.sort_unstable();
        let c = cards[t];
        let nrows: usize = parents.iter().map(|&q| cards[q]).product();
        let mut probs = vec![f64::NAN; nrows * c];
        let mut seen = vec![false; nrows];

        let check_len = |row: &[f64], at: (usize, usize)| -> Result<()> {
            if row.len() != c {
                return Err(err(at.0, at.1, format!("expected {c} probabilities, found {}", row.len())));
            }
            Ok(())
        };
        if let Some((table, tat)) = &b.table {
            if table.len() != nrows * c {
                return Err(err(tat.0, tat.1, format!("expected {} probabilities, found {}", nrows * c, table.len())));
            }
            // a flat table lists rows in file-parent order, first parent slowest
            for (r, chunk) in table.chunks(c).enumerate() {
                let mut vals = vec![0usize; file_parents.len()];
                let mut rest = r;
                for k in (0..file_parents.len()).rev() {
                    vals[k] = rest % cards[file_parents[k]];
                    rest /= cards[file_parents[k]];
                }
                let row_idx = sorted_row(&parents, &file_parents, &vals, &cards);
                let mut row = chunk.to_vec();
                normalize(&mut row, *tat)?;
                probs[row_idx * c..(row_idx + 1) * c].copy_from_slice(&row);
                seen[row_idx] = true;
            }
        }
        for (vals, row, rat) in &b.rows {
            if vals.len() != file_parents.len() {
                return Err(err(rat.0, rat.1, format!("expected {} parent values, found {}", file_parents.len(), vals.len())));
            }
            let mut idx = Vec::with_capacity(vals.len());
            for ((v, vat), &q) in vals.iter().zip(&file_parents) {
                let k = vars[q]
                    .outcomes
                    .iter()
                    .position(|o| o == v)
                    .or_else(|| v.parse::<usize>().ok().filter(|&k| k < cards[q] && !vars[q].outcomes.contains(v)))
                    .ok_or_else(|| err(vat.0, vat.1, format!("'{v}' is not an outcome of '{}'", vars[q].name)))?;
                idx.push(k);
            }
            check_len(row, *rat)?;
            let r = sorted_row(&parents, &file_parents, &idx, &cards);
            if seen[r] {
                return Err(err(rat.0, rat.1, "parent tuple listed twice"));
            }
            let mut row = row.clone();
            normalize(&mut row, *rat)?;
            probs[r * c..(r + 1) * c].copy_from_slice(&row);
            seen[r] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            match &b.default {
                Some((d, dat)) => {
                    check_len(d, *dat)?;
                    let mut d = d.clone();
                    normalize(&mut d, *dat)?;
                    for (r, s) in seen.iter().enumerate() {
                        if !s {
                            probs[r * c..(r + 1) * c].copy_from_slice(&d);
                        }
                    }
                }
                None => {
                    let _ = r;
                    return Err(err(at.0, at.1, format!("missing parent tuple in block for '{}'", vars[t].name)));
                }
            }
        }
        edges.extend(parents.iter().map(|&q| (q, t)));
        cpds[t] = Some(Cpd::Table { parents, card: c, probs });
    }
    let mut out = Vec::with_capacity(vars.len());
    for (k, cpd) in cpds.into_iter().enumerate() {
        out.push(cpd.ok_or_else(|| err(1, 1, format!("no probability block for '{}'", vars[k].name)))?);
    }
    let meta: Vec<VarMeta> = vars
        .into_iter()
        .map(|v| VarMeta {
            cardinality: v.outcomes.len(),
            name: v.name,
            outcomes: v.outcomes,
        })
        .collect();
    let graph = CausalGraph::from_edges(meta, &edges)?;
    Ok(BifNetwork {
        name,
        cgm: Cgm::new(graph, out)?,
    })
}

/// Row index with parents in `sorted` order, given values listed in `file` order.
fn sorted_row(sorted: &[usize], file: &[usize], vals: &[usize], cards: &[usize]) -> usize {
    sorted.iter().fold(0, |acc, &q| {
        let k = file.iter().position(|&f| f == q).expect("parent present");
        acc * cards[q] + vals[k]
    })
}

/// Writes a table-based model as `.bif` text, parents in index order.
/// Reading the output back yields an identical model.
pub fn unparse_bif(cgm: &Cgm, name: &str) -> Result<String> {
    let cards = cgm.cards();
    let vars = cgm.graph.vars();
    let label = |v: usize, k: usize| -> String {
        vars[v].outcomes.get(k).cloned().unwrap_or_else(|| k.to_string())
    };
    let mut out = String::new();
    let _ = writeln!(out, "network {name} {{\n}}");
    for (v, meta) in vars.iter().enumerate() {
        let labels: Vec<String> = (0..cards[v]).map(|k| label(v, k)).collect();
        let _ = writeln!(
            out,
            "variable {} {{\n  type discrete [ {} ] {{ {} }};\n}}",
            meta.name,
            cards[v],
            labels.join(", ")
        );
    }
    for (v, cpd) in cgm.cpds.iter().enumerate() {
        let table = cpd.to_table(&cards);
        let c = cards[v];
        let parents = cpd.parents();
        let fmt_row = |row: &[f64]| row.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        if parents.is_empty() {
            let _ = writeln!(out, "probability ( {} ) {{\n  table {};\n}}", vars[v].name, fmt_row(&table));
            continue;
        }
        let pnames: Vec<&str> = parents.iter().map(|&q| vars[q].name.as_str()).collect();
        let _ = writeln!(out, "probability ( {} | {} ) {{", vars[v].name, pnames.join(", "));
        for (r, row) in table.chunks(c).enumerate() {
            let mut vals = vec![0usize; parents.len()];
            let mut rest = r;
            for k in (0..parents.len()).rev() {
                vals[k] = rest % cards[parents[k]];
                rest /= cards[parents[k]];
            }
            let tuple: Vec<String> = parents.iter().zip(&vals).map(|(&q, &k)| label(q, k)).collect();
            let _ = writeln!(out, "  ({}) {};", tuple.join(", "), fmt_row(row));
        }
        let _ = writeln!(out, "}}");
    }
    Ok(out)
}

/// Networks bundled with the crate.
pub mod fixtures {
    /// Three binary variables in a chain with weak links.
    pub const CHAIN3: &str = include_str!("../fixtures/chain3.bif");
    pub const CANCER: &str = include_str!("../fixtures/cancer.bif");
    pub const EARTHQUAKE: &str = include_str!("../fixtures/earthquake.bif");
    pub const ASIA: &str = include_str!("../fixtures/asia.bif");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::exact_joint;

    #[test]
    fn single_root() {
        let cgm = parse_bif("variable X { type discrete [ 2 ] { a, b }; }\nprobability ( X ) { table 0.7, 0.3; }").unwrap();
        assert_eq!(cgm.n(), 1);
        let j = exact_joint(&cgm).unwrap();
        assert!((j.probs[0] - 0.7).abs() < 1e-15);
        assert_eq!(cgm.graph.vars()[0].outcomes, vec!["a", "b"]);
    }

    #[test]
    fn bundled_networks() {
        let cancer = parse_bif(fixtures::CANCER).unwrap();
        assert_eq!((cancer.n(), cancer.graph.edge_count()), (5, 4));
        let asia = parse_bif(fixtures::ASIA).unwrap();
        assert_eq!((asia.n(), asia.graph.edge_count()), (8, 8));
        let eq = parse_bif(fixtures::EARTHQUAKE).unwrap();
        assert_eq!((eq.n(), eq.graph.edge_count()), (5, 4));
        let chain = parse_bif(fixtures::CHAIN3).unwrap();
        let reference = crate::scm::reference_chain();
        assert_eq!(chain.cpds, reference.cpds);
        assert_eq!(chain.graph.edges(), reference.graph.edges());
    }

    #[test]
    fn parents_reordered_to_index_order() {
        let text = "variable A { type discrete [ 2 ] { a0, a1 }; }
variable B { type discrete [ 3 ] { b0, b1, b2 }; }
variable C { type discrete [ 2 ] { c0, c1 }; }
probability ( A ) { table 0.5, 0.5; }
probability ( B ) { table 0.2, 0.3, 0.5; }
probability ( C | B, A ) {
  (b0, a0) 0.1, 0.9; (b1, a0) 0.2, 0.8; (b2, a0) 0.3, 0.7;
  (b0, a1) 0.4, 0.6; (b1, a1) 0.5, 0.5; (b2, a1) 0.6, 0.4;
}";
        let cgm = parse_bif(text).unwrap();
        assert_eq!(cgm.cpds[2].parents(), &[0, 1]);
        let t = cgm.cpds[2].to_table(&cgm.cards());
        // row (a1, b2)
        assert!((t[(3 + 2) * 2] - 0.6).abs() < 1e-15);
        // row (a0, b1)
        assert!((t[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn errors_have_positions() {
        let e = parse_bif("variable X { type discrete [ 2 ] { a, b }; }\nprobability ( Y ) { table 0.7, 0.3; }").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, col: 15, .. }), "{e}");
        let e = parse_bif("variable X { type continuous; }").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_bif("variable X { type discrete [ 2 ] { a, b }; }\nprobability ( X ) {\n table 0.5, 0.3; }").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, col: 2, .. }), "{e}");
        let e = parse_bif("variable X { type discrete [ 2 ] { a, b }; } @").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, col: 46, .. }), "{e}");
        let missing = "variable X { type discrete [ 2 ] { a, b }; }
variable Y { type discrete [ 2 ] { a, b }; }
probability ( X ) { table 0.5, 0.5; }
probability ( Y | X ) { (a) 0.5, 0.5; }";
        assert!(parse_bif(missing).unwrap_err().to_string().contains("missing parent tuple"));
        let arity = missing.replace("(a) 0.5, 0.5;", "(a) 0.5, 0.5; (b) 1.0;");
        assert!(parse_bif(&arity).unwrap_err().to_string().contains("expected 2 probabilities"));
    }

    #[test]
    fn comments_properties_and_renormalization() {
        let text = "// header\nnetwork n { property software x; }\n/* block\n comment */
variable X { type discrete [ 2 ] { a, b }; property pos = (1, 2); }
probability ( X ) { table 0.704, 0.3; }";
        let cgm = parse_bif(text).unwrap();
        let t = cgm.cpds[0].to_table(&cgm.cards());
        assert!((t[0] + t[1] - 1.0).abs() < 1e-15);
        assert!((t[0] - 0.704 / 1.004).abs() < 1e-15);
    }

    #[test]
    fn unparse_roundtrip() {
        for text in [fixtures::CANCER, fixtures::ASIA, fixtures::EARTHQUAKE, fixtures::CHAIN3] {
            let net = parse_bif_network(text).unwrap();
            let again = parse_bif_network(&unparse_bif(&net.cgm, &net.name).unwrap()).unwrap();
            assert_eq!(again, net);
        }
    }
}
