//! TOML problem files: model, weights and optional `P̃` / `x0` in one document.
//!
//! ```toml
//! modes = 2
//! state_dim = 1
//! input_dim = 1
//! sigma2 = 1.0
//! noise_kind = "gaussian"        # optional: gaussian | rademacher
//! rho = [[0.2, 0.8], [0.4, 0.6]]
//! pi0 = [0.5, 0.5]
//! x0 = [1.0]                     # optional
//!
//! [[mode]]                       # one block per mode, in order
//! A = 0.5                        # scalar (1x1), flat row-major list, or list of rows
//! B = -0.5
//! C = 0.5
//! D = -0.5
//! Q = -1.0
//! R = -3.0
//! terminal_P = 20.0              # optional, default 0
//! ptilde = -10.0                 # optional, all modes or none
//! ```

use std::fmt;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::model::{self, CostWeights, MjlsModel, NoiseKind};

/// Parsed problem file (always `f64`).
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: MjlsModel<f64>,
    pub weights: CostWeights<f64>,
    pub ptilde: Option<Vec<DMatrix<f64>>>,
    pub x0: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseOptions {
    /// Replace weights with symmetry defects up to `1e-8` by their symmetric part.
    pub symmetrize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixValue {
    Scalar(f64),
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    modes: usize,
    state_dim: usize,
    input_dim: usize,
    sigma2: f64,
    noise_kind: Option<Spanned<String>>,
    rho: Spanned<Vec<Vec<f64>>>,
    pi0: Spanned<Vec<f64>>,
    x0: Option<Spanned<MatrixValue>>,
    #[serde(default)]
    mode: Vec<Spanned<RawMode>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawMode {
    A: Spanned<MatrixValue>,
    B: Spanned<MatrixValue>,
    C: Spanned<MatrixValue>,
    D: Spanned<MatrixValue>,
    Q: Spanned<MatrixValue>,
    R: Spanned<MatrixValue>,
    terminal_P: Option<Spanned<MatrixValue>>,
    ptilde: Option<Spanned<MatrixValue>>,
}

struct Ctx<'a> {
    text: &'a str,
    diagnostics: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn line(&self, span: Range<usize>) -> Option<usize> {
        let start = span.start.min(self.text.len());
        Some(self.text[..start].bytes().filter(|&b| b == b'\n').count() + 1)
    }

    fn push(&mut self, span: Option<Range<usize>>, field: impl Into<String>, message: impl Into<String>) {
        let line = span.and_then(|s| self.line(s));
        self.diagnostics.push(Diagnostic { line, field: field.into(), message: message.into() });
    }

    fn matrix(&mut self, field: &str, value: &Spanned<MatrixValue>, rows: usize, cols: usize) -> DMatrix<f64> {
        let found = match value.get_ref() {
            MatrixValue::Scalar(v) if rows * cols == 1 => return DMatrix::from_element(1, 1, *v),
            MatrixValue::Scalar(_) => "a scalar".to_string(),
            MatrixValue::Flat(v) if v.len() == rows * cols => return DMatrix::from_row_slice(rows, cols, v),
            MatrixValue::Flat(v) => format!("{} entries", v.len()),
            MatrixValue::Rows(r) if r.len() == rows && r.iter().all(|row| row.len() == cols) => {
                return DMatrix::from_fn(rows, cols, |i, j| r[i][j]);
            }
            MatrixValue::Rows(r) => format!("{} rows of lengths {:?}", r.len(), r.iter().map(Vec::len).collect::<Vec<_>>()),
        };
        self.push(Some(value.span()), field, format!("expected a {rows}x{cols} matrix, found {found}"));
        DMatrix::zeros(rows, cols)
    }
}

fn toml_diagnostic(text: &str, err: &toml::de::Error) -> Diagnostic {
    let ctx = Ctx { text, diagnostics: vec![] };
    Diagnostic { line: err.span().and_then(|s| ctx.line(s)), field: String::new(), message: err.message().to_string() }
}

/// Parses and validates a problem file.
pub fn parse_problem(text: &str, opts: ParseOptions) -> Result<Problem, ParseError> {
    let raw: RawProblem = toml::from_str(text).map_err(|e| ParseError { diagnostics: vec![toml_diagnostic(text, &e)] })?;
    let mut ctx = Ctx { text, diagnostics: vec![] };
    let (l, n, m) = (raw.modes, raw.state_dim, raw.input_dim);

    let noise_kind = match &raw.noise_kind {
        None => NoiseKind::default(),
        Some(s) => s.get_ref().parse().unwrap_or_else(|_| {
            ctx.push(Some(s.span()), "noise_kind", format!("unknown noise kind {:?} (expected gaussian or rademacher)", s.get_ref()));
            NoiseKind::default()
        }),
    };
    if raw.mode.len() != l {
        ctx.push(None, "mode", format!("expected {l} [[mode]] blocks, found {}", raw.mode.len()));
    }
    let rho_rows = raw.rho.get_ref();
    if rho_rows.len() != l || rho_rows.iter().any(|r| r.len() != l) {
        ctx.push(Some(raw.rho.span()), "rho", format!("expected {l} rows of {l} entries"));
    }
    if raw.pi0.get_ref().len() != l {
        ctx.push(Some(raw.pi0.span()), "pi0", format!("expected {l} entries, found {}", raw.pi0.get_ref().len()));
    }
    if !ctx.diagnostics.is_empty() {
        return Err(ParseError { diagnostics: ctx.diagnostics });
    }

    let mut model = MjlsModel {
        n,
        m,
        a: vec![],
        b: vec![],
        c: vec![],
        d: vec![],
        sigma2: raw.sigma2,
        rho: DMatrix::from_fn(l, l, |i, j| rho_rows[i][j]),
        pi0: DVector::from_vec(raw.pi0.get_ref().clone()),
        noise_kind,
    };
    let mut weights = CostWeights { q: vec![], r: vec![], terminal_p: vec![] };
    let mut ptilde = vec![];
    for (i, block) in raw.mode.iter().enumerate() {
        let b = block.get_ref();
        let f = |key: &str| format!("mode[{}].{key}", i + 1);
        model.a.push(ctx.matrix(&f("A"), &b.A, n, n));
        model.b.push(ctx.matrix(&f("B"), &b.B, n, n));
        model.c.push(ctx.matrix(&f("C"), &b.C, n, m));
        model.d.push(ctx.matrix(&f("D"), &b.D, n, m));
        weights.q.push(ctx.matrix(&f("Q"), &b.Q, n, n));
        weights.r.push(ctx.matrix(&f("R"), &b.R, m, m));
        weights.terminal_p.push(match &b.terminal_P {
            Some(v) => ctx.matrix(&f("terminal_P"), v, n, n),
            None => DMatrix::zeros(n, n),
        });
        if let Some(v) = &b.ptilde {
            ptilde.push(ctx.matrix(&f("ptilde"), v, n, n));
        }
    }
    if !ptilde.is_empty() && ptilde.len() != l {
        ctx.push(None, "ptilde", format!("given for {} of {l} modes; give it for all or none", ptilde.len()));
    }
    let x0 = raw.x0.as_ref().map(|v| {
        let x = ctx.matrix("x0", v, n, 1);
        DVector::from_column_slice(x.as_slice())
    });
    if !ctx.diagnostics.is_empty() {
        return Err(ParseError { diagnostics: ctx.diagnostics });
    }

    if opts.symmetrize {
        weights.symmetrize_small_defects();
    }
    let report = model::validate_model(&model, &weights);
    for v in &report.violations {
        let span = violation_span(&raw, &v.field);
        ctx.push(span, v.field.clone(), v.message.clone());
    }
    if !ctx.diagnostics.is_empty() {
        return Err(ParseError { diagnostics: ctx.diagnostics });
    }
    Ok(Problem { model, weights, ptilde: (!ptilde.is_empty()).then_some(ptilde), x0 })
}

/// Maps a validation field such as `rho` or `Q_2` back to its source span.
fn violation_span(raw: &RawProblem, field: &str) -> Option<Range<usize>> {
    match field {
        "rho" => return Some(raw.rho.span()),
        "pi0" => return Some(raw.pi0.span()),
        _ => {}
    }
    let (name, idx) = field.rsplit_once('_')?;
    let block = raw.mode.get(idx.parse::<usize>().ok()?.checked_sub(1)?)?.get_ref();
    let value = match name {
        "A" => &block.A,
        "B" => &block.B,
        "C" => &block.C,
        "D" => &block.D,
        "Q" => &block.Q,
        "R" => &block.R,
        "terminal_P" => block.terminal_P.as_ref()?,
        _ => return None,
    };
    Some(value.span())
}

/// Reads and parses a problem file; I/O failures become diagnostics.
pub fn read_problem(path: impl AsRef<Path>, opts: ParseOptions) -> Result<Problem, ParseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ParseError {
        diagnostics: vec![Diagnostic { line: None, field: String::new(), message: format!("cannot read {}: {e}", path.display()) }],
    })?;
    parse_problem(&text, opts)
}

#[derive(Serialize)]
struct OutProblem {
    modes: usize,
    state_dim: usize,
    input_dim: usize,
    sigma2: f64,
    noise_kind: &'static str,
    rho: Vec<Vec<f64>>,
    pi0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
    mode: Vec<OutMode>,
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct OutMode {
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    D: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
    terminal_P: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ptilde: Option<Vec<Vec<f64>>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Canonical form: every matrix as a list of rows, `terminal_P` always present.
/// Floats are written in shortest round-trip form, so parsing the output
/// reproduces the problem exactly.
pub fn to_toml(problem: &Problem) -> String {
    let (model, w) = (&problem.model, &problem.weights);
    let out = OutProblem {
        modes: model.modes(),
        state_dim: model.n,
        input_dim: model.m,
        sigma2: model.sigma2,
        noise_kind: model.noise_kind.as_str(),
        rho: rows(&model.rho),
        pi0: model.pi0.iter().copied().collect(),
        x0: problem.x0.as_ref().map(|x| x.iter().copied().collect()),
        mode: (0..model.modes())
            .map(|i| OutMode {
                A: rows(&model.a[i]),
                B: rows(&model.b[i]),
                C: rows(&model.c[i]),
                D: rows(&model.d[i]),
                Q: rows(&w.q[i]),
                R: rows(&w.r[i]),
                terminal_P: rows(&w.terminal_p[i]),
                ptilde: problem.ptilde.as_ref().map(|p| rows(&p[i])),
            })
            .collect(),
    };
    toml::to_string(&out).expect("problem data serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{scalar_tuple, section4};
    use proptest::prelude::*;

    const SECTION4: &str = include_str!("../../../fixtures/section4.toml");

    #[test]
    fn canonical_fixture_is_section4() {
        let p = parse_problem(SECTION4, ParseOptions::default()).unwrap();
        let (model, w) = section4();
        assert_eq!(p.model, model);
        assert_eq!(p.weights, w);
        assert_eq!(p.ptilde, Some(scalar_tuple(&[-10.0, 19.0])));
        assert_eq!(p.x0, Some(DVector::from_vec(vec![1.0])));
    }

    #[test]
    fn malformed_rho_row_reports_line_and_field() {
        let bad = SECTION4.replace("[0.4, 0.6]", "[0.4, 0.5]");
        let err = parse_problem(&bad, ParseOptions::default()).unwrap_err();
        let d = &err.diagnostics[0];
        assert_eq!(d.field, "rho");
        assert!(d.message.contains("row 2 sums to"), "{d}");
        let rho_line = SECTION4.lines().position(|l| l.starts_with("rho")).unwrap() + 1;
        assert_eq!(d.line, Some(rho_line));
    }

    #[test]
    fn shape_errors_and_syntax_errors() {
        let bad = SECTION4.replacen("A = 0.5", "A = [0.5, 1.0]", 1);
        let err = parse_problem(&bad, ParseOptions::default()).unwrap_err();
        assert_eq!(err.diagnostics[0].field, "mode[1].A");
        assert!(err.diagnostics[0].line.is_some());

        let err = parse_problem("modes = 2\nrho = [", ParseOptions::default()).unwrap_err();
        assert_eq!(err.diagnostics[0].line, Some(2));

        let err = parse_problem(&SECTION4.replace("sigma2", "sigma"), ParseOptions::default()).unwrap_err();
        assert!(err.to_string().contains("sigma"));
    }

    #[test]
    fn matrix_forms_and_symmetrize() {
        let text = r#"
modes = 1
state_dim = 2
input_dim = 1
sigma2 = 0.5
rho = [[1.0]]
pi0 = [1.0]

[[mode]]
A = [1.0, 2.0, 3.0, 4.0]
B = [[0.0, 0.0], [0.0, 0.0]]
C = [1.0, 0.0]
D = [[0.0], [1.0]]
Q = [[1.0, 0.5], [0.500000001, 2.0]]
R = 1.0
"#;
        assert!(parse_problem(text, ParseOptions::default()).is_err());
        let p = parse_problem(text, ParseOptions { symmetrize: true }).unwrap();
        assert_eq!(p.model.a[0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(p.model.c[0], DMatrix::from_row_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(p.weights.terminal_p[0], DMatrix::zeros(2, 2));
        assert_eq!(p.weights.q[0], p.weights.q[0].transpose());
        assert!(p.ptilde.is_none() && p.x0.is_none());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, Just(0.0), (-1e-300..1e-300f64)]
    }

    proptest! {
        #[test]
        fn round_trip(l in 1usize..4, n in 1usize..3, m in 1usize..3, seed in prop::collection::vec(finite(), 64), raw_rho in prop::collection::vec(0.01..1.0f64, 9)) {
            let mut it = seed.iter().copied().cycle();
            let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| it.next().unwrap());
            let sym = |x: DMatrix<f64>| (&x + x.transpose()) * 0.5;
            let rho = DMatrix::from_fn(l, l, |i, j| raw_rho[i * 3 + j]);
            let rho = DMatrix::from_fn(l, l, |i, j| rho[(i, j)] / rho.row(i).sum());
            let model = MjlsModel {
                n, m,
                a: (0..l).map(|_| mat(n, n)).collect(),
                b: (0..l).map(|_| mat(n, n)).collect(),
                c: (0..l).map(|_| mat(n, m)).collect(),
                d: (0..l).map(|_| mat(n, m)).collect(),
                sigma2: 0.75,
                rho,
                pi0: DVector::from_element(l, 1.0 / l as f64),
                noise_kind: NoiseKind::Rademacher,
            };
            let weights = CostWeights {
                q: (0..l).map(|_| sym(mat(n, n))).collect(),
                r: (0..l).map(|_| sym(mat(m, m))).collect(),
                terminal_p: (0..l).map(|_| sym(mat(n, n))).collect(),
            };
            let problem = Problem { model, weights, ptilde: Some((0..l).map(|_| sym(mat(n, n))).collect()), x0: Some(DVector::from_fn(n, |_, _| it.next().unwrap())) };
            prop_assume!(model::validate_model(&problem.model, &problem.weights).passed());
            let text = to_toml(&problem);
            let back = parse_problem(&text, ParseOptions::default()).unwrap();
            prop_assert_eq!(&back, &problem);
            prop_assert_eq!(to_toml(&back), text);
        }
    }
}
