//! CSV data files and gnuplot scripts for the tables and figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{LineComparison, ReconError, RegSweep};

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:e}"),
        _ => "nan".into(),
    }
}

/// Mismatch per method (rows) and case (columns).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub cases: Vec<String>,
    pub methods: Vec<String>,
    /// `validation[method][case]`.
    pub validation: Vec<Vec<Option<f64>>>,
    pub train: Vec<Vec<Option<f64>>>,
}

impl Table1 {
    pub fn new(cases: Vec<String>) -> Self {
        Self {
            cases,
            ..Self::default()
        }
    }

    fn row(&mut self, method: &str) -> usize {
        match self.methods.iter().position(|m| m == method) {
            Some(k) => k,
            None => {
                self.methods.push(method.to_owned());
                self.validation.push(vec![None; self.cases.len()]);
                self.train.push(vec![None; self.cases.len()]);
                self.methods.len() - 1
            }
        }
    }

    pub fn set(&mut self, method: &str, case: &str, train: f64, validation: f64) {
        let r = self.row(method);
        if let Some(c) = self.cases.iter().position(|x| x == case) {
            self.train[r][c] = Some(train);
            self.validation[r][c] = Some(validation);
        }
    }

    pub fn get(&self, method: &str, case: &str) -> Option<(f64, f64)> {
        let r = self.methods.iter().position(|m| m == method)?;
        let c = self.cases.iter().position(|x| x == case)?;
        Some((self.train[r][c]?, self.validation[r][c]?))
    }

    fn csv(&self, values: &[Vec<Option<f64>>]) -> String {
        let mut out = String::from("method");
        for c in &self.cases {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (m, row) in self.methods.iter().zip(values) {
            out.push_str(m);
            for v in row {
                write!(out, ",{}", fmt_opt(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Validation mismatch (`table1.csv`).
    pub fn validation_csv(&self) -> String {
        self.csv(&self.validation)
    }

    /// Training mismatch (`table1_train.csv`).
    pub fn train_csv(&self) -> String {
        self.csv(&self.train)
    }
}

/// `n_samples,x,min,mean,max,completed`
pub fn fig2_csv(curve: &[ReconError]) -> String {
    let mut out = String::from("n_samples,x,min,mean,max,completed\n");
    for c in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.n_samples,
            c.x,
            fmt_opt(Some(c.min)),
            fmt_opt(Some(c.mean)),
            fmt_opt(Some(c.max)),
            c.completed
        )
        .unwrap();
    }
    out
}

pub fn fig2_gp(csv_name: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set logscale xy\n\
         set xlabel 'training samples'\n\
         set ylabel 'relative Frobenius error of Y'\n\
         plot '{csv_name}' using 2:3 with points pt 6 title 'min', \\\n\
         \x20    '' using 2:4 with linespoints pt 2 title 'mean', \\\n\
         \x20    '' using 2:5 with points pt 4 title 'max'\n"
    )
}

/// `i,j,g_est,g_ref,b_est,b_ref,y_ref_abs,violation`
pub fn fig3_csv(cmp: &LineComparison) -> String {
    let mut out = String::from("i,j,g_est,g_ref,b_est,b_ref,y_ref_abs,violation\n");
    for r in &cmp.rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{}",
            r.i,
            r.j,
            r.g_est,
            r.g_ref,
            r.b_est,
            r.b_ref,
            r.y_ref_abs,
            u8::from(r.is_violation())
        )
        .unwrap();
    }
    out
}

pub fn fig3_gp(csv_name: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set multiplot layout 1,2\n\
         set xlabel 'reference'\n\
         set ylabel 'estimate'\n\
         set title 'conductance'\n\
         plot '{csv_name}' using 4:3 with points pt 7 notitle, x notitle\n\
         set title 'susceptance'\n\
         plot '{csv_name}' using 6:5 with points pt 7 notitle, x notitle\n\
         unset multiplot\n"
    )
}

/// `alpha,quality,final_loss`
pub fn fig4_csv(sweep: &RegSweep) -> String {
    let mut out = String::from("alpha,quality,final_loss\n");
    for p in &sweep.points {
        writeln!(out, "{:e},{},{}", p.alpha, fmt_opt(p.quality), fmt_opt(p.final_loss)).unwrap();
    }
    out
}

pub fn fig4_gp(csv_name: &str, sweep: &RegSweep) -> String {
    format!(
        "# quality indicator: {}\n\
         set datafile separator ','\n\
         set key autotitle columnhead\n\
         set logscale y\n\
         set xlabel 'regularization coefficient (index)'\n\
         set ylabel 'quality indicator'\n\
         plot '{csv_name}' using 0:2:xtic(1) with linespoints pt 7 notitle\n",
        sweep.indicator
    )
}
