//! One-way importer for MATPOWER `.m` case files.
//!
//! Only `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch` and the optional
//! `mpc.gencost` are read; every other statement is skipped. Matrix bodies
//! must consist of numeric literals.

use num_complex::Complex64;
use std::collections::HashMap;

use super::{Bus, BusKind, Generator, GridCase, GridError, Line};

// Column indices (0-based) of the MATPOWER case format.
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const GS: usize = 4;
const BS: usize = 5;

const GEN_BUS: usize = 0;
const QMAX: usize = 3;
const QMIN: usize = 4;
const VG: usize = 5;
const GEN_STATUS: usize = 7;
const PMAX: usize = 8;
const PMIN: usize = 9;

const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_B: usize = 4;
const TAP: usize = 8;
const SHIFT: usize = 9;
const BR_STATUS: usize = 10;

#[derive(Debug)]
struct Matrix {
    rows: Vec<Vec<f64>>,
    line: usize,
    column: usize,
}

struct Scanner<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn error(&self, message: impl Into<String>) -> GridError {
        GridError::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    fn skip_comment(&mut self) {
        while let Some(c) = self.peek() {
            if c == '\n' {
                break;
            }
            self.bump();
        }
    }

    /// Skip spaces, tabs, comments, and (optionally) newlines.
    fn skip_blank(&mut self, newlines: bool) {
        while let Some(c) = self.peek() {
            match c {
                '%' => self.skip_comment(),
                '.' => {
                    // MATLAB line continuation `...`
                    let mut ahead = self.chars.clone();
                    if ahead.next() == Some('.') && ahead.next() == Some('.') && ahead.next() == Some('.') {
                        self.skip_comment();
                        self.bump();
                    } else {
                        break;
                    }
                }
                '\n' if !newlines => break,
                c if c.is_whitespace() => {
                    self.bump();
                }
                _ => break,
            }
        }
    }

    fn ident(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' || c == '.' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        s
    }

    fn number(&mut self) -> Result<f64, GridError> {
        let (line, column) = (self.line, self.column);
        let mut tok = String::new();
        while let Some(c) = self.peek() {
            if !(c.is_whitespace() || matches!(c, ';' | ',' | ']' | '%')) {
                tok.push(c);
                self.bump();
            } else {
                break;
            }
        }
        let value = match tok.as_str() {
            "Inf" | "+Inf" => Ok(f64::INFINITY),
            "-Inf" => Ok(f64::NEG_INFINITY),
            _ => tok.parse::<f64>(),
        };
        value.map_err(|_| GridError::Parse {
            line,
            column,
            message: if tok.is_empty() {
                format!("expected a numeric literal, found {:?}", self.peek().unwrap_or('\0'))
            } else {
                format!("expected a numeric literal, found `{tok}`")
            },
        })
    }

    fn expect(&mut self, want: char) -> Result<(), GridError> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => Err(self.error(format!("expected `{want}`, found `{c}`"))),
            None => Err(self.error(format!("expected `{want}`, found end of input"))),
        }
    }

    /// Skip to the character after the next `;` or newline outside of quotes.
    fn skip_statement(&mut self) {
        let mut depth = 0i32;
        let mut quoted = false;
        while let Some(c) = self.bump() {
            match c {
                '\'' | '"' => quoted = !quoted,
                '%' if !quoted => self.skip_comment(),
                '[' | '{' | '(' if !quoted => depth += 1,
                ']' | '}' | ')' if !quoted => depth -= 1,
                ';' | '\n' if !quoted && depth <= 0 => break,
                _ => {}
            }
        }
    }

    fn matrix(&mut self) -> Result<Matrix, GridError> {
        let (line, column) = (self.line, self.column);
        self.expect('[')?;
        let mut rows = Vec::new();
        let mut row = Vec::new();
        loop {
            self.skip_blank(false);
            match self.peek() {
                None => return Err(self.error("unterminated matrix")),
                Some(']') => {
                    self.bump();
                    break;
                }
                Some(';') | Some('\n') => {
                    self.bump();
                    if !row.is_empty() {
                        rows.push(std::mem::take(&mut row));
                    }
                }
                Some(',') => {
                    self.bump();
                }
                Some(_) => row.push(self.number()?),
            }
        }
        if !row.is_empty() {
            rows.push(row);
        }
        if let Some(width) = rows.first().map(Vec::len) {
            if let Some(k) = rows.iter().position(|r| r.len() != width) {
                return Err(GridError::Parse {
                    line,
                    column,
                    message: format!("row {} has {} columns, expected {width}", k + 1, rows[k].len()),
                });
            }
        }
        Ok(Matrix { rows, line, column })
    }
}

fn parse_sections(text: &str) -> Result<(Option<f64>, HashMap<String, Matrix>), GridError> {
    let mut sc = Scanner::new(text);
    let mut base_mva = None;
    let mut mats = HashMap::new();
    loop {
        sc.skip_blank(true);
        let Some(c) = sc.peek() else { break };
        if c == ';' {
            sc.bump();
            continue;
        }
        if !(c.is_alphabetic() || c == '_') {
            sc.skip_statement();
            continue;
        }
        let name = sc.ident();
        sc.skip_blank(false);
        let target = name.strip_prefix("mpc.").map(str::to_owned);
        match target.as_deref() {
            Some("baseMVA") => {
                sc.expect('=')?;
                sc.skip_blank(false);
                base_mva = Some(sc.number()?);
                sc.skip_statement();
            }
            Some(key @ ("bus" | "gen" | "branch" | "gencost")) => {
                sc.expect('=')?;
                sc.skip_blank(true);
                let m = sc.matrix()?;
                mats.insert(key.to_owned(), m);
                sc.skip_statement();
            }
            _ => sc.skip_statement(),
        }
    }
    Ok((base_mva, mats))
}

fn need_cols(m: &Matrix, name: &str, cols: usize) -> Result<(), GridError> {
    match m.rows.first() {
        Some(r) if r.len() < cols => Err(GridError::Parse {
            line: m.line,
            column: m.column,
            message: format!("mpc.{name} needs at least {cols} columns, found {}", r.len()),
        }),
        _ => Ok(()),
    }
}

fn as_id(v: f64, line: usize, column: usize) -> Result<usize, GridError> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(GridError::Parse {
            line,
            column,
            message: format!("bus number {v} is not a non-negative integer"),
        })
    }
}

/// Marginal cost of a `mpc.gencost` row: the linear coefficient of a
/// polynomial cost, or the first segment slope of a piecewise-linear one.
fn marginal_cost(row: &[f64]) -> f64 {
    let model = row.first().copied().unwrap_or(2.0) as i64;
    let n = row.get(3).copied().unwrap_or(0.0) as usize;
    let coeffs = row.get(4..).unwrap_or(&[]);
    match model {
        1 if n >= 2 && coeffs.len() >= 4 => {
            let dp = coeffs[2] - coeffs[0];
            if dp.abs() > 0.0 {
                (coeffs[3] - coeffs[1]) / dp
            } else {
                0.0
            }
        }
        _ if n >= 2 && coeffs.len() >= n => coeffs[n - 2],
        _ => 0.0,
    }
}

/// Folded branch: series admittance between `from` and `to`, plus the
/// admittance left over at each end once the symmetric Pi-stamp is removed.
struct Branch {
    from: usize,
    to: usize,
    y: Complex64,
    charging: f64,
    extra_from: Complex64,
    extra_to: Complex64,
}

/// Import a MATPOWER case into per-unit form.
pub fn import_matpower(text: &str) -> Result<GridCase, GridError> {
    let (base_mva, mats) = parse_sections(text)?;
    let missing = |name: &str| GridError::Parse {
        line: 1,
        column: 1,
        message: format!("missing mpc.{name}"),
    };
    let base_mva = base_mva.ok_or_else(|| missing("baseMVA"))?;
    let bus_m = mats.get("bus").ok_or_else(|| missing("bus"))?;
    let gen_m = mats.get("gen").ok_or_else(|| missing("gen"))?;
    let br_m = mats.get("branch").ok_or_else(|| missing("branch"))?;
    need_cols(bus_m, "bus", 6)?;
    need_cols(gen_m, "gen", 10)?;
    need_cols(br_m, "branch", 11)?;

    let mut buses = Vec::with_capacity(bus_m.rows.len());
    for row in &bus_m.rows {
        let kind = match row[BUS_TYPE] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => return Err(GridError::UnsupportedFeature(format!("isolated bus {}", row[BUS_I]))),
            t => {
                return Err(GridError::Parse {
                    line: bus_m.line,
                    column: bus_m.column,
                    message: format!("unknown bus type {t}"),
                })
            }
        };
        buses.push(Bus {
            id: as_id(row[BUS_I], bus_m.line, bus_m.column)?,
            kind,
            shunt_g: row[GS] / base_mva,
            shunt_b: row[BS] / base_mva,
            base_load_p: row[PD] / base_mva,
            base_load_q: row[QD] / base_mva,
        });
    }
    let index: HashMap<usize, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let lookup = |v: f64, m: &Matrix| -> Result<usize, GridError> {
        let id = as_id(v, m.line, m.column)?;
        if index.contains_key(&id) {
            Ok(id)
        } else {
            Err(GridError::Parse {
                line: m.line,
                column: m.column,
                message: format!("reference to unknown bus {id}"),
            })
        }
    };

    let costs: Vec<f64> = match mats.get("gencost") {
        Some(m) => m.rows.iter().map(|r| marginal_cost(r)).collect(),
        None => vec![1.0; gen_m.rows.len()],
    };
    let mut generators = Vec::new();
    for (k, row) in gen_m.rows.iter().enumerate() {
        let bus = lookup(row[GEN_BUS], gen_m)?;
        if row[GEN_STATUS] <= 0.0 {
            continue;
        }
        generators.push(Generator {
            bus,
            p_min: row[PMIN] / base_mva,
            p_max: row[PMAX] / base_mva,
            q_min: row[QMIN] / base_mva,
            q_max: row[QMAX] / base_mva,
            cost: costs.get(k).copied().unwrap_or(1.0),
            v_set: row[VG],
        });
    }
    // PV buses without an in-service generator cannot hold their voltage.
    for bus in &mut buses {
        if bus.kind == BusKind::Pv && !generators.iter().any(|g| g.bus == bus.id) {
            bus.kind = BusKind::Pq;
        }
    }

    let mut branches: Vec<Branch> = Vec::new();
    for row in &br_m.rows {
        if row[BR_STATUS] <= 0.0 {
            continue;
        }
        if row[SHIFT] != 0.0 {
            return Err(GridError::UnsupportedFeature(format!(
                "phase-shifting transformer between buses {} and {}",
                row[F_BUS], row[T_BUS]
            )));
        }
        let from = lookup(row[F_BUS], br_m)?;
        let to = lookup(row[T_BUS], br_m)?;
        if from == to {
            return Err(GridError::Parse {
                line: br_m.line,
                column: br_m.column,
                message: format!("branch connects bus {from} to itself"),
            });
        }
        let ys = super::series_admittance(row[BR_R], row[BR_X])?;
        let tap = if row[TAP] == 0.0 { 1.0 } else { row[TAP] };
        let half = Complex64::new(0.0, row[BR_B] / 2.0);
        // Tap-adjusted stamp: Y_ff = (ys + jb/2)/t^2, Y_tt = ys + jb/2, Y_ft = Y_tf = -ys/t.
        let y = ys / tap;
        branches.push(Branch {
            from,
            to,
            y,
            charging: row[BR_B],
            extra_from: (ys + half) / (tap * tap) - y - half,
            extra_to: ys - y,
        });
    }

    let mut merged: Vec<Branch> = Vec::new();
    for br in branches {
        match merged
            .iter_mut()
            .find(|m| (m.from == br.from && m.to == br.to) || (m.from == br.to && m.to == br.from))
        {
            Some(m) => {
                m.y += br.y;
                m.charging += br.charging;
                if m.from == br.from {
                    m.extra_from += br.extra_from;
                    m.extra_to += br.extra_to;
                } else {
                    m.extra_from += br.extra_to;
                    m.extra_to += br.extra_from;
                }
            }
            None => merged.push(br),
        }
    }

    let mut lines = Vec::with_capacity(merged.len());
    for m in merged {
        let z = 1.0 / m.y;
        for (id, extra) in [(m.from, m.extra_from), (m.to, m.extra_to)] {
            let bus = &mut buses[index[&id]];
            bus.shunt_g += extra.re;
            bus.shunt_b += extra.im;
        }
        lines.push(Line {
            from: m.from,
            to: m.to,
            r: z.re,
            x: z.im,
            y_sh: m.charging,
        });
    }

    let grid = GridCase {
        base_mva,
        buses,
        lines,
        generators,
        reduced: false,
        threshold: None,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::assemble_admittance;
    use approx::assert_abs_diff_eq;

    const TWO_BUS: &str = r"function mpc = two
mpc.version = '2';
mpc.baseMVA = 100;
% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	10	0	5	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.02	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	250	250	250	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	25	0;
];
";

    #[test]
    fn minimal_two_bus() {
        let g = import_matpower(TWO_BUS).unwrap();
        assert_eq!(g.buses.len(), 2);
        assert_eq!(g.lines.len(), 1);
        assert_eq!(g.generators.len(), 1);
        assert_eq!(g.buses[0].kind, BusKind::Slack);
        assert_abs_diff_eq!(g.buses[1].base_load_p, 0.5);
        assert_abs_diff_eq!(g.buses[1].shunt_b, 0.05);
        assert_abs_diff_eq!(g.generators[0].p_max, 2.5);
        assert_abs_diff_eq!(g.generators[0].p_min, 0.1);
        assert_eq!(g.generators[0].cost, 25.0);
        assert_abs_diff_eq!(g.lines[0].r, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(g.lines[0].x, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn missing_branch_is_parse_error() {
        let text = TWO_BUS.replace("mpc.branch", "mpc.lines");
        match import_matpower(&text) {
            Err(GridError::Parse { message, .. }) => assert!(message.contains("branch")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expressions_rejected_with_location() {
        let text = TWO_BUS.replace("0.01\t0.1\t0.02", "0.01\t2*0.05\t0.02");
        match import_matpower(&text) {
            Err(GridError::Parse { line, message, .. }) => {
                assert_eq!(line, 13);
                assert!(message.contains("2*0.05"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phase_shifter_unsupported() {
        let text = TWO_BUS.replace("250\t0\t0\t1\t-360", "250\t0.98\t5\t1\t-360");
        assert!(matches!(import_matpower(&text), Err(GridError::UnsupportedFeature(_))));
    }

    #[test]
    fn out_of_service_branch_dropped_and_parallel_merged() {
        let text = TWO_BUS.replace(
            "mpc.branch = [\n",
            "mpc.branch = [\n\t2\t1\t0.01\t0.1\t0.02\t0\t0\t0\t0\t0\t1\t-360\t360;\n\t1\t2\t0.5\t0.5\t0\t0\t0\t0\t0\t0\t0\t-360\t360;\n",
        );
        let g = import_matpower(&text).unwrap();
        assert_eq!(g.lines.len(), 1);
        // Two identical branches in parallel halve the impedance.
        assert_abs_diff_eq!(g.lines[0].r, 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(g.lines[0].x, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(g.lines[0].y_sh, 0.04, epsilon = 1e-15);
    }

    #[test]
    fn tap_folding_reproduces_tap_stamp() {
        let text = TWO_BUS.replace("250\t0\t0\t1\t-360", "250\t0.95\t0\t1\t-360");
        let g = import_matpower(&text).unwrap();
        let y = assemble_admittance(&g).unwrap();
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(0.01, 0.1);
        let half = Complex64::new(0.0, 0.01);
        let t = 0.95;
        assert!((y.get(0, 1) + ys / t).norm() < 1e-12);
        assert!((y.get(0, 0) - (ys + half) / (t * t)).norm() < 1e-12);
        // bus 2 carries its own 0.05 shunt on top of the branch end
        assert!((y.get(1, 1) - (ys + half) - Complex64::new(0.0, 0.05)).norm() < 1e-12);
    }
}
