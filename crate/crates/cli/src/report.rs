//! Curve files for plotting: CRLB against the swept quantity, with the Monte
//! Carlo variances as overlay points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::commands::{CRLB, MC};
use crate::{write_atomic, CliError};

#[derive(Debug, Clone, PartialEq)]
struct Row {
    sweep: String,
    value: f64,
    pn: f64,
    parameter: String,
    crlb: f64,
    variance: Option<f64>,
    bias2: Option<f64>,
    trials: Option<usize>,
}

fn read_table(path: &Path) -> Result<Option<Vec<BTreeMap<String, String>>>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let mut rows = Vec::new();
    for (n, l) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = l.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::Config(format!(
                "{} line {}: expected {} columns, found {}",
                path.display(),
                n + 2,
                header.len(),
                cells.len()
            )));
        }
        rows.push(header.iter().map(|h| h.to_string()).zip(cells.iter().map(|c| c.to_string())).collect());
    }
    Ok(Some(rows))
}

fn num(row: &BTreeMap<String, String>, key: &str, file: &str) -> Result<f64, CliError> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Config(format!("{file}: missing or invalid column `{key}`")))
}

type Key = (String, u64, u64, String);

fn key(sweep: &str, value: f64, pn: f64, parameter: &str) -> Key {
    (sweep.to_string(), value.to_bits(), pn.to_bits(), parameter.to_string())
}

fn collect(dir: &Path) -> Result<(Vec<Row>, bool), CliError> {
    let crlb = read_table(&dir.join(CRLB))?;
    let mc = read_table(&dir.join(MC))?;
    if crlb.is_none() && mc.is_none() {
        return Err(CliError::MissingInput(format!(
            "{} holds neither {CRLB} nor {MC}",
            dir.display()
        )));
    }
    let mut rows: BTreeMap<Key, Row> = BTreeMap::new();
    for r in crlb.iter().flatten() {
        let (v, pn) = (num(r, "sweep_value", CRLB)?, num(r, "pn", CRLB)?);
        let (s, p) = (&r["sweep"], &r["parameter"]);
        rows.insert(
            key(s, v, pn, p),
            Row {
                sweep: s.clone(),
                value: v,
                pn,
                parameter: p.clone(),
                crlb: num(r, "crlb", CRLB)?,
                variance: None,
                bias2: None,
                trials: None,
            },
        );
    }
    let has_mc = mc.is_some();
    for r in mc.iter().flatten() {
        let (v, pn) = (num(r, "sweep_value", MC)?, num(r, "pn", MC)?);
        let (s, p) = (&r["sweep"], &r["parameter"]);
        let entry = rows.entry(key(s, v, pn, p)).or_insert_with(|| Row {
            sweep: s.clone(),
            value: v,
            pn,
            parameter: p.clone(),
            crlb: f64::NAN,
            variance: None,
            bias2: None,
            trials: None,
        });
        // the campaign's own bound is used when no CRLB sweep was run
        if entry.crlb.is_nan() {
            entry.crlb = num(r, "crlb", MC)?;
        }
        entry.variance = Some(num(r, "variance", MC)?);
        entry.bias2 = Some(num(r, "bias2", MC)?);
        entry.trials = Some(num(r, "trials_used", MC)? as usize);
    }
    Ok((rows.into_values().collect(), has_mc))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn report(dir: &Path, check: bool) -> Result<(), CliError> {
    let (rows, has_mc) = collect(dir)?;
    let mut sweeps: Vec<&str> = rows.iter().map(|r| r.sweep.as_str()).collect();
    sweeps.dedup();
    sweeps.sort();
    sweeps.dedup();
    for sweep in &sweeps {
        let sel: Vec<&Row> = rows.iter().filter(|r| r.sweep == *sweep).collect();
        let mut csv = String::from("sweep_value,pn,parameter,crlb,mc_variance,mc_bias2,trials_used\n");
        for r in &sel {
            writeln!(
                csv,
                "{:e},{:e},{},{:e},{},{},{}",
                r.value,
                r.pn,
                r.parameter,
                r.crlb,
                opt(r.variance),
                opt(r.bias2),
                r.trials.map(|t| t.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        write_atomic(&dir.join(format!("report_crlb_vs_{sweep}.csv")), csv.as_bytes())?;
        write_atomic(&dir.join(format!("report_crlb_vs_{sweep}.svg")), svg_chart(sweep, &sel).as_bytes())?;
        println!("{sweep}: {} points", sel.len());
    }
    if check {
        if !has_mc {
            return Err(CliError::MissingInput(format!("--check needs {} in {}", MC, dir.display())));
        }
        let violations = bound_violations(&rows);
        if !violations.is_empty() {
            return Err(CliError::CheckFailed(violations.join("; ")));
        }
        println!("check passed: every Monte Carlo variance respects its bound");
    }
    Ok(())
}

/// Variances below the CRLB by more than three standard errors of a sample
/// variance, `sqrt(2 / (T - 1))` relative.
fn bound_violations(rows: &[Row]) -> Vec<String> {
    rows.iter()
        .filter_map(|r| {
            let (v, t) = (r.variance?, r.trials?);
            if t < 2 || !(r.crlb.is_finite() && r.crlb > 0.0) {
                return None;
            }
            let slack = 3.0 * (2.0 / (t as f64 - 1.0)).sqrt();
            (v < r.crlb * (1.0 - slack)).then(|| {
                format!(
                    "{} = {:e} at PN {:e}: Var({}) = {:e} below CRLB {:e}",
                    r.sweep, r.value, r.pn, r.parameter, v, r.crlb
                )
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Log-log (log-linear for non-flux sweeps) line chart: one CRLB line per
/// parameter and photon number, MC variances as circles.
fn svg_chart(sweep: &str, rows: &[&Row]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let log_x = sweep == "pn";
    let xs = |v: f64| if log_x { v.log10() } else { v };
    let ys: Vec<f64> = rows
        .iter()
        .flat_map(|r| [Some(r.crlb), r.variance])
        .flatten()
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(f64::log10)
        .collect();
    let xv: Vec<f64> = rows.iter().map(|r| xs(r.value)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&xv);
    let (y0, y1) = range(&ys);
    let px = |x: f64| m + (xs(x) - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y.log10() - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    )
    .unwrap();
    let xlabel = if log_x { "log10 PN" } else { sweep };
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 20.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">log10 variance</text>"#,
        h / 2.0,
        h / 2.0
    )
    .unwrap();
    for (v, anchor_x) in [(x0, m), (x1, w - m)] {
        writeln!(s, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{v:.3}</text>"#, h - m + 16.0).unwrap();
    }
    for (v, anchor_y) in [(y0, h - m), (y1, m)] {
        writeln!(s, r#"<text x="{}" y="{anchor_y}" text-anchor="end">{v:.2}</text>"#, m - 6.0).unwrap();
    }

    let mut series: BTreeMap<(String, u64), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let group = if log_x { 0 } else { r.pn.to_bits() };
        series.entry((r.parameter.clone(), group)).or_default().push(r);
    }
    for (i, ((param, group), mut pts)) in series.into_iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        pts.sort_by(|a, b| a.value.total_cmp(&b.value));
        let line: Vec<String> = pts
            .iter()
            .filter(|r| r.crlb.is_finite() && r.crlb > 0.0)
            .map(|r| format!("{:.2},{:.2}", px(r.value), py(r.crlb)))
            .collect();
        if line.len() > 1 {
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}"/>"#, line.join(" ")).unwrap();
        }
        for r in &pts {
            if let Some(v) = r.variance.filter(|v| *v > 0.0) {
                writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="none" stroke="{colour}"/>"#,
                    px(r.value),
                    py(v)
                )
                .unwrap();
            }
        }
        let label = if log_x {
            param.clone()
        } else {
            format!("{param} (PN {:e})", f64::from_bits(group))
        };
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{label}</text>"#,
            w - m + 4.0 - 120.0,
            m + 14.0 * i as f64
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
