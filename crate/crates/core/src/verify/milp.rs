//! Big-M mixed-integer encoding of a targeted query, written in LP file
//! format, plus a reader for the subset of the format the writer emits.
//!
//! Each unstable ReLU with pre-activation bounds `[l, u]` gets a continuous
//! output `a`, its pre-activation `z` and a binary phase `d`:
//!
//! ```text
//! a ≥ 0,  a − z ≥ 0,  a − z − l·d ≤ −l,  a − u·d ≤ 0
//! ```
//!
//! Stable ReLUs are folded into the next layer's rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Block, Network};
use crate::serialize::format_f64;

use super::bounds::symbolic_propagate;
use super::{Query, QueryMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MilpVariant {
    /// Zero objective; any feasible point is a targeted adversarial example.
    Feasibility,
    /// Minimizes the L∞ distance `eps` to the center, capped at the query radius.
    MinEpsilon,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MilpStats {
    pub variables: usize,
    pub constraints: usize,
    pub binaries: usize,
}

#[derive(Clone, Copy)]
enum Post {
    Zero,
    Var(usize),
}

struct Writer {
    rows: String,
    bounds: String,
    names: Vec<String>,
    binaries: Vec<usize>,
    constraints: usize,
}

impl Writer {
    fn var(&mut self, name: String, lower: f64, upper: f64) -> usize {
        let _ = writeln!(self.bounds, " {} <= {} <= {}", bound(lower), name, bound(upper));
        self.names.push(name);
        self.names.len() - 1
    }

    fn free(&mut self, name: String) -> usize {
        let _ = writeln!(self.bounds, " {name} free");
        self.names.push(name);
        self.names.len() - 1
    }

    fn row(&mut self, name: &str, terms: &[(f64, usize)], relation: &str, rhs: f64) {
        let _ = write!(self.rows, " {name}:");
        for &(c, v) in terms {
            let sign = if c.is_sign_negative() { '-' } else { '+' };
            let _ = write!(self.rows, " {} {} {}", sign, format_f64(c.abs()), self.names[v]);
        }
        let _ = writeln!(self.rows, " {} {}", relation, format_f64(rhs));
        self.constraints += 1;
    }
}

fn bound(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format_f64(v)
    }
}

/// Writes the encoding of a targeted query.
pub fn write_milp(net: &Network, query: &Query, variant: MilpVariant) -> Result<(String, MilpStats)> {
    query.check(net)?;
    let QueryMode::Targeted(target) = query.mode else {
        return Err(Error::Export("only targeted queries can be encoded".into()));
    };
    let bx = query.input_box()?;
    let bounds = symbolic_propagate(net, &bx)?;
    let mut w = Writer { rows: String::new(), bounds: String::new(), names: Vec::new(), binaries: Vec::new(), constraints: 0 };

    let mut prev: Vec<Post> = (0..net.input_dim())
        .map(|i| Post::Var(w.var(format!("x{i}"), bx.lower[i], bx.upper[i])))
        .collect();
    let eps = match variant {
        MilpVariant::Feasibility => None,
        MilpVariant::MinEpsilon => Some(w.var("eps".into(), 0.0, query.epsilon)),
    };
    if let Some(e) = eps {
        for (i, &c) in query.center.iter().enumerate() {
            let Post::Var(x) = prev[i] else { unreachable!() };
            w.row(&format!("dist_lo{i}"), &[(1.0, x), (1.0, e)], ">=", c);
            w.row(&format!("dist_hi{i}"), &[(1.0, x), (-1.0, e)], "<=", c);
        }
    }

    let blocks = net.blocks();
    let mut hidden = 0usize;
    let mut outputs = Vec::new();
    for (b, block) in blocks.iter().enumerate() {
        let Block::Linear(layer) = block else { continue };
        let last = b + 1 == blocks.len();
        let pre = &bounds[b];
        let mut next = Vec::with_capacity(layer.out_dim());
        for o in 0..layer.out_dim() {
            let (l, u) = (pre.lower[o], pre.upper[o]);
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::Export(format!("unbounded pre-activation in layer {hidden}")));
            }
            let inactive = !last && u <= 0.0;
            if inactive {
                next.push(Post::Zero);
                continue;
            }
            let z = if last {
                w.free(format!("y{o}"))
            } else {
                w.var(format!("z{hidden}_{o}"), l, u)
            };
            let mut terms = vec![(1.0, z)];
            for (&coef, src) in layer.weights.row(o).iter().zip(&prev) {
                if let (Post::Var(v), true) = (src, coef != 0.0) {
                    terms.push((-coef, *v));
                }
            }
            let name = if last { format!("out{o}") } else { format!("lin{hidden}_{o}") };
            w.row(&name, &terms, "=", layer.bias[o]);
            if last {
                outputs.push(z);
            } else if l >= 0.0 {
                next.push(Post::Var(z));
            } else {
                let a = w.var(format!("a{hidden}_{o}"), 0.0, u);
                let d = w.var(format!("d{hidden}_{o}"), 0.0, 1.0);
                w.binaries.push(d);
                let tag = format!("{hidden}_{o}");
                w.row(&format!("relu_nonneg{tag}"), &[(1.0, a)], ">=", 0.0);
                w.row(&format!("relu_above{tag}"), &[(1.0, a), (-1.0, z)], ">=", 0.0);
                w.row(&format!("relu_active{tag}"), &[(1.0, a), (-1.0, z), (-l, d)], "<=", -l);
                w.row(&format!("relu_inactive{tag}"), &[(1.0, a), (-u, d)], "<=", 0.0);
                next.push(Post::Var(a));
            }
        }
        if !last {
            hidden += 1;
        }
        prev = next;
    }
    for (c, &y) in outputs.iter().enumerate() {
        if c != target {
            w.row(&format!("target{c}"), &[(1.0, outputs[target]), (-1.0, y)], ">=", 0.0);
        }
    }

    let mut text = String::new();
    let _ = writeln!(
        text,
        "\\ targeted query: label {} -> class {}, epsilon {}",
        query.true_label,
        target,
        format_f64(query.epsilon)
    );
    text.push_str("Minimize\n");
    match eps {
        Some(e) => {
            let _ = writeln!(text, " obj: + {} {}", format_f64(1.0), w.names[e]);
        }
        None => {
            let _ = writeln!(text, " obj: + {} {}", format_f64(0.0), w.names[0]);
        }
    }
    text.push_str("Subject To\n");
    text.push_str(&w.rows);
    text.push_str("Bounds\n");
    text.push_str(&w.bounds);
    if !w.binaries.is_empty() {
        text.push_str("Binary\n");
        for &d in &w.binaries {
            let _ = writeln!(text, " {}", w.names[d]);
        }
    }
    text.push_str("End\n");
    let stats = MilpStats { variables: w.names.len(), constraints: w.constraints, binaries: w.binaries.len() };
    Ok((text, stats))
}

/// Writes the encoding to `path`.
pub fn export_milp(net: &Network, query: &Query, variant: MilpVariant, path: impl AsRef<Path>) -> Result<MilpStats> {
    let path = path.as_ref();
    let (text, stats) = write_milp(net, query, variant)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub name: String,
    pub terms: Vec<(f64, String)>,
    pub relation: super::simplex::Relation,
    pub rhs: f64,
}

/// Parsed contents of an LP file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpModel {
    pub minimize: bool,
    pub objective: Vec<(f64, String)>,
    pub rows: Vec<LpRow>,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub binaries: Vec<String>,
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    match tok {
        "+inf" | "inf" | "+infinity" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ => tok.parse().map_err(|_| Error::Parse { offset: line, message: format!("bad number {tok:?}") }),
    }
}

fn parse_terms(tokens: &[&str], line: usize) -> Result<Vec<(f64, String)>> {
    let mut terms = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let sign = match tokens[i] {
            "+" => 1.0,
            "-" => -1.0,
            _ => return Err(Error::Parse { offset: line, message: format!("expected sign, got {:?}", tokens[i]) }),
        };
        let (coef, name) = match (tokens.get(i + 1), tokens.get(i + 2)) {
            (Some(c), Some(n)) => (parse_number(c, line)?, n.to_string()),
            _ => return Err(Error::Parse { offset: line, message: "truncated term".into() }),
        };
        terms.push((sign * coef, name));
        i += 3;
    }
    Ok(terms)
}

/// Reads files produced by [`write_milp`]. Error offsets are line numbers.
pub fn parse_lp(text: &str) -> Result<LpModel> {
    use super::simplex::Relation;
    #[derive(PartialEq)]
    enum Section {
        None,
        Objective,
        Rows,
        Bounds,
        Binary,
        End,
    }
    let mut model = LpModel::default();
    let mut section = Section::None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('\\') {
            continue;
        }
        let bad = |m: &str| Error::Parse { offset: line_no, message: m.to_string() };
        match line.to_ascii_lowercase().as_str() {
            "minimize" | "maximize" => {
                model.minimize = line.eq_ignore_ascii_case("minimize");
                section = Section::Objective;
                continue;
            }
            "subject to" => {
                section = Section::Rows;
                continue;
            }
            "bounds" => {
                section = Section::Bounds;
                continue;
            }
            "binary" => {
                section = Section::Binary;
                continue;
            }
            "end" => {
                section = Section::End;
                continue;
            }
            _ => {}
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Objective => {
                let body = tokens.first().filter(|t| t.ends_with(':')).map_or(&tokens[..], |_| &tokens[1..]);
                model.objective = parse_terms(body, line_no)?;
            }
            Section::Rows => {
                let name = tokens.first().and_then(|t| t.strip_suffix(':')).ok_or_else(|| bad("row without a name"))?;
                if tokens.len() < 3 {
                    return Err(bad("row without a relation"));
                }
                let rel = tokens[tokens.len() - 2];
                let relation = match rel {
                    "<=" => Relation::Le,
                    ">=" => Relation::Ge,
                    "=" => Relation::Eq,
                    _ => return Err(bad(&format!("unknown relation {rel:?}"))),
                };
                let rhs = parse_number(tokens[tokens.len() - 1], line_no)?;
                let terms = parse_terms(&tokens[1..tokens.len() - 2], line_no)?;
                model.rows.push(LpRow { name: name.to_string(), terms, relation, rhs });
            }
            Section::Bounds => match tokens.as_slice() {
                [name, "free"] => {
                    model.bounds.insert(name.to_string(), (f64::NEG_INFINITY, f64::INFINITY));
                }
                [lo, "<=", name, "<=", hi] => {
                    let b = (parse_number(lo, line_no)?, parse_number(hi, line_no)?);
                    model.bounds.insert(name.to_string(), b);
                }
                _ => return Err(bad("unrecognized bound")),
            },
            Section::Binary => model.binaries.extend(tokens.iter().map(|t| t.to_string())),
            Section::None | Section::End => return Err(bad("text outside of any section")),
        }
    }
    if section != Section::End {
        return Err(Error::Parse { offset: text.lines().count(), message: "missing End".into() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LinearLayer;
    use crate::tensor::{Matrix, Vector};

    /// One hidden neuron `z = 3x − 1` over `x ∈ [0, 1]`, so `[l, u] = [−1, 2]`.
    fn one_relu() -> Network {
        Network::new(
            1,
            vec![
                Block::Linear(LinearLayer::new(Matrix::from_rows(&[[3.0]]).unwrap(), Vector::from(vec![-1.0])).unwrap()),
                Block::Relu,
                Block::Linear(LinearLayer::new(Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(), Vector::zeros(2)).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn big_m_rows_for_one_unstable_relu() {
        let q = Query::new(Vector::from(vec![0.5]), 0.5, 0, QueryMode::Targeted(1)).unwrap();
        let (text, stats) = write_milp(&one_relu(), &q, MilpVariant::Feasibility).unwrap();
        assert_eq!(stats.binaries, 1);
        let one = format_f64(1.0);
        let two = format_f64(2.0);
        assert!(text.contains(&format!("relu_nonneg0_0: + {one} a0_0 >= {}", format_f64(0.0))));
        assert!(text.contains(&format!("relu_above0_0: + {one} a0_0 - {one} z0_0 >=")));
        assert!(text.contains(&format!("relu_active0_0: + {one} a0_0 - {one} z0_0 + {one} d0_0 <= {one}")));
        assert!(text.contains(&format!("relu_inactive0_0: + {one} a0_0 - {two} d0_0 <=")));
        let model = parse_lp(&text).unwrap();
        assert_eq!(model.binaries, vec!["d0_0".to_string()]);
        assert_eq!(model.rows.len(), stats.constraints);
        assert_eq!(model.bounds["z0_0"], (-1.0, 2.0));
    }

    #[test]
    fn stable_network_has_no_binary_section() {
        let q = Query::new(Vector::from(vec![0.9]), 0.05, 0, QueryMode::Targeted(1)).unwrap();
        let (text, stats) = write_milp(&one_relu(), &q, MilpVariant::MinEpsilon).unwrap();
        assert_eq!(stats.binaries, 0);
        assert!(!text.contains("Binary"));
        let model = parse_lp(&text).unwrap();
        assert_eq!(model.objective, vec![(1.0, "eps".to_string())]);
        assert_eq!(model.bounds["eps"], (0.0, 0.05));
    }

    #[test]
    fn untargeted_queries_are_not_encoded() {
        let q = Query::new(Vector::from(vec![0.5]), 0.1, 0, QueryMode::Untargeted).unwrap();
        assert!(matches!(write_milp(&one_relu(), &q, MilpVariant::Feasibility), Err(Error::Export(_))));
    }

    #[test]
    fn reader_rejects_garbage() {
        assert!(parse_lp("Minimize\n obj: + 1 x\nSubject To\n c: + 1 x ~ 2\nEnd\n").is_err());
        assert!(parse_lp("Minimize\n obj: + 1 x\n").is_err());
    }
}
