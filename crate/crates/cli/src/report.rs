//! CSV, summary and gnuplot writers. Every real is printed with 17
//! significant digits so files are bit-exact across runs.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use cclqr_core::duality::DualityCertificate;
use cclqr_core::primal_dual::SolveTrace;
use cclqr_core::Vector;

/// Formats a real with 17 significant digits.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_header(n_constraints: usize) -> String {
    let mut cols = vec!["k".to_string()];
    cols.extend((1..=n_constraints).map(|i| format!("lambda_{i}")));
    cols.extend((0..=n_constraints).map(|i| format!("J_{i}")));
    cols.extend(["D", "regret", "subgrad_norm", "pg_steps", "eps_est"].map(String::from));
    cols.join(",")
}

/// Renders a trace. Row `k` holds `λ^k` (after `k` dual updates), `D(λ^k)` and
/// `Regret_k`, together with the costs, subgradient norm, PG step count and
/// error estimate of the primal solve that produced the `k`-th update.
pub fn trace_csv(trace: &SolveTrace, n_constraints: usize, regret: &[f64]) -> String {
    assert_eq!(regret.len(), trace.len(), "one regret value per iteration");
    let mut out = trace_header(n_constraints);
    out.push('\n');
    for (i, (rec, r)) in trace.iterations.iter().zip(regret).enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(rec.lambda_next.iter().map(|x| real(*x)));
        row.extend(rec.costs.iter().map(|x| real(*x)));
        row.push(real(rec.dual_next));
        row.push(real(*r));
        row.push(real(rec.subgradient.norm()));
        row.push(rec.pg_steps.to_string());
        row.push(real(rec.eps_est));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &SolveTrace, n_constraints: usize, regret: &[f64]) -> io::Result<()> {
    std::fs::write(path, trace_csv(trace, n_constraints, regret))
}

/// One certificate row per multiplier-program weight `z`.
pub struct CertificateRow<'a> {
    pub z: &'a Vector,
    pub cert: &'a DualityCertificate,
}

pub fn certificate_csv(rows: &[CertificateRow<'_>], limits: &Vector) -> String {
    let n = limits.len();
    let mut cols: Vec<String> = (1..=n).map(|i| format!("z_{i}")).collect();
    cols.extend((1..=n).map(|i| format!("lambda_{i}")));
    cols.extend((0..=n).map(|i| format!("J_{i}")));
    cols.extend(["D", "gap_rel", "stationarity"].map(String::from));
    cols.extend((1..=n).map(|i| format!("slack_{i}")));
    cols.extend((1..=n).map(|i| format!("margin_{i}")));
    cols.push("pass".into());
    let mut out = cols.join(",");
    out.push('\n');
    for row in rows {
        let c = row.cert;
        let mut fields: Vec<String> = row.z.iter().map(|x| real(*x)).collect();
        fields.extend(c.lambda_star.iter().map(|x| real(*x)));
        fields.extend(c.costs.iter().map(|x| real(*x)));
        fields.push(real(c.dual_value));
        fields.push(real(c.duality_gap_rel));
        fields.push(real(c.stationarity_norm));
        fields.extend(c.slackness_residuals.iter().map(|x| real(*x)));
        fields.extend(c.feasibility_margins.iter().map(|x| real(*x)));
        fields.push(u8::from(c.passes(limits)).to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Rows of `name,index,value` used by the grad-check and probes experiments.
#[derive(Debug, Default, Clone)]
pub struct Table {
    header: &'static str,
    rows: Vec<(String, usize, f64)>,
}

impl Table {
    pub fn new(header: &'static str) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, index: usize, value: f64) {
        self.rows.push((name.into(), index, value));
    }

    pub fn render(&self) -> String {
        let mut out = String::from(self.header);
        out.push('\n');
        for (name, index, value) in &self.rows {
            let _ = writeln!(out, "{name},{index},{}", real(*value));
        }
        out
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Whether the check gates the exit status.
    pub enforced: bool,
}

pub fn summary(experiment: &str, seed: u64, checks: &[Check], failure: Option<(&str, &str)>) -> String {
    let mut out = format!("experiment: {experiment}\nseed: {seed}\n");
    for c in checks {
        let tag = match (c.enforced, c.passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "INFO ok",
            (false, false) => "INFO violated",
        };
        let _ = writeln!(out, "{tag} {}: {}", c.name, c.detail);
    }
    let ok = failure.is_none() && checks.iter().all(|c| !c.enforced || c.passed);
    if let Some((stage, message)) = failure {
        let _ = writeln!(out, "FAIL stage {stage}: {message}");
    }
    let _ = writeln!(out, "result: {}", if ok { "PASS" } else { "FAIL" });
    out
}

/// Gnuplot script drawing regret, relative violations and the relative
/// optimality gap `(J_0 − J_0*)/J_0*` from the given trace files.
pub fn plot_script(traces: &[(String, String)], limits: &Vector, j0_star: f64) -> String {
    let n = limits.len();
    let regret_col = 2 * n + 4;
    let j0_col = n + 2;
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key autotitle columnhead\nset xlabel 'dual iteration k'\n");
    s.push_str("set terminal pngcairo size 900,600\n");
    s.push_str("\nset output 'regret.png'\nset logscale y\nset ylabel 'Regret_k'\nplot ");
    let regret: Vec<String> = traces
        .iter()
        .map(|(file, title)| format!("'{file}' using 1:{regret_col} with lines title '{title}'"))
        .collect();
    s.push_str(&regret.join(", \\\n     "));
    s.push_str("\nunset logscale y\n");
    if n > 0 {
        s.push_str("\nset output 'violation.png'\nset ylabel '(J_i - c_i)/c_i'\nplot ");
        let mut curves = Vec::new();
        for (file, title) in traces {
            for i in 1..=n {
                curves.push(format!(
                    "'{file}' using 1:(((${col})-{c})/{c}) with lines title '{title} i={i}'",
                    col = j0_col + i,
                    c = real(limits[i - 1]),
                ));
            }
        }
        s.push_str(&curves.join(", \\\n     "));
        s.push('\n');
    }
    let _ = write!(
        s,
        "\nJ0_star = {}\nset output 'optimality_gap.png'\nset ylabel '(J_0 - J_0*)/J_0*'\nplot ",
        real(j0_star)
    );
    let gap: Vec<String> = traces
        .iter()
        .map(|(file, title)| format!("'{file}' using 1:((${j0_col}-J0_star)/J0_star) with lines title '{title}'"))
        .collect();
    s.push_str(&gap.join(", \\\n     "));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_expands_indices() {
        assert_eq!(
            trace_header(2),
            "k,lambda_1,lambda_2,J_0,J_1,J_2,D,regret,subgrad_norm,pg_steps,eps_est"
        );
        assert_eq!(trace_header(0), "k,J_0,D,regret,subgrad_norm,pg_steps,eps_est");
    }

    #[test]
    fn reals_round_trip_with_seventeen_digits() {
        for x in [0.1, 1.0 / 3.0, 18.143079737534734, -2.5e-300, 6.02e23] {
            let s = real(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
        }
    }

    #[test]
    fn summary_marks_failures() {
        let checks = [
            Check { name: "a", passed: true, detail: "ok".into(), enforced: true },
            Check { name: "b", passed: false, detail: "bad".into(), enforced: false },
        ];
        let s = summary("solve", 0, &checks, None);
        assert!(s.contains("PASS a: ok"));
        assert!(s.contains("INFO violated b"));
        assert!(s.ends_with("result: PASS\n"));
        let s = summary("solve", 0, &checks, Some(("solve", "diverged")));
        assert!(s.contains("FAIL stage solve: diverged"));
        assert!(s.ends_with("result: FAIL\n"));
    }
}
