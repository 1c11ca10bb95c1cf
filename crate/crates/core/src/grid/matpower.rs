//! Reader for the subset of MATPOWER version-2 case files covering the bus,
//! gen, branch and gencost tables. Anything else is rejected by name.

use super::{Branch, Bus, BusKind, CaseFile, FlowCoeffs, Generator, GridError};

/// Unlimited branches (rateA = 0) get this apparent-power limit, in MVA.
pub const UNLIMITED_RATE_MVA: f64 = 1e4;

struct Table {
    rows: Vec<(usize, Vec<f64>)>,
}

pub fn parse(text: &str) -> Result<CaseFile, GridError> {
    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;
    let mut gencost = None;

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let line = strip_comment(lines[i]).trim();
        i += 1;
        if line.is_empty() || line.starts_with("function") {
            continue;
        }
        let Some(rest) = line.strip_prefix("mpc.") else {
            return Err(GridError::Parse { line: lineno, msg: format!("unexpected statement `{line}`") });
        };
        let (name, value) = rest
            .split_once('=')
            .ok_or_else(|| GridError::Parse { line: lineno, msg: "expected `mpc.<field> = ...`".into() })?;
        let name = name.trim();
        let value = value.trim();
        match name {
            "version" => {
                let v = value.trim_end_matches(';').trim().trim_matches('\'');
                if v != "2" {
                    return Err(GridError::Unsupported(format!("mpc.version = {v} (only version 2 is read)")));
                }
            }
            "baseMVA" => {
                let v = value.trim_end_matches(';').trim();
                base_mva = Some(
                    v.parse::<f64>()
                        .map_err(|e| GridError::Parse { line: lineno, msg: format!("baseMVA `{v}`: {e}") })?,
                );
            }
            "bus" | "gen" | "branch" | "gencost" => {
                let (table, next) = read_table(&lines, i - 1, value)?;
                i = next;
                match name {
                    "bus" => bus = Some(table),
                    "gen" => gen = Some(table),
                    "branch" => branch = Some(table),
                    _ => gencost = Some(table),
                }
            }
            other => return Err(GridError::Unsupported(format!("mpc.{other}"))),
        }
    }

    let missing = |f: &str| GridError::Field { field: format!("mpc.{f}"), msg: "missing".into() };
    let base_mva = base_mva.ok_or_else(|| missing("baseMVA"))?;
    let bus = bus.ok_or_else(|| missing("bus"))?;
    let gen = gen.ok_or_else(|| missing("gen"))?;
    let branch = branch.ok_or_else(|| missing("branch"))?;
    let gencost = gencost.ok_or_else(|| missing("gencost"))?;

    let need = |t: &Table, cols: usize, what: &str| -> Result<(), GridError> {
        for (line, row) in &t.rows {
            if row.len() < cols {
                return Err(GridError::Parse {
                    line: *line,
                    msg: format!("mpc.{what} row has {} columns, need at least {cols}", row.len()),
                });
            }
        }
        Ok(())
    };
    need(&bus, 13, "bus")?;
    need(&gen, 10, "gen")?;
    need(&branch, 11, "branch")?;
    need(&gencost, 4, "gencost")?;

    let mut buses = Vec::with_capacity(bus.rows.len());
    for (line, r) in &bus.rows {
        let kind = match r[1] as i64 {
            1 => BusKind::PQ,
            2 => BusKind::PV,
            3 => BusKind::REF,
            4 => return Err(GridError::Unsupported(format!("isolated bus (type 4) at line {line}"))),
            t => return Err(GridError::Parse { line: *line, msg: format!("bus type {t}") }),
        };
        buses.push(Bus {
            id: r[0] as usize,
            kind,
            p_demand: r[2] / base_mva,
            q_demand: r[3] / base_mva,
            g_shunt: r[4] / base_mva,
            b_shunt: r[5] / base_mva,
            v_min: r[12],
            v_max: r[11],
            v_set: 1.0,
        });
    }

    if gencost.rows.len() != gen.rows.len() {
        if gencost.rows.len() == 2 * gen.rows.len() {
            return Err(GridError::Unsupported("mpc.gencost reactive-power cost rows".into()));
        }
        return Err(GridError::Field {
            field: "mpc.gencost".into(),
            msg: format!("{} rows for {} generators", gencost.rows.len(), gen.rows.len()),
        });
    }

    let mut generators = Vec::new();
    for (k, ((line, g), (cline, c))) in gen.rows.iter().zip(&gencost.rows).enumerate() {
        if g[7] <= 0.0 {
            continue;
        }
        if c[0] as i64 != 2 {
            return Err(GridError::Unsupported(format!(
                "mpc.gencost model {} at line {cline} (only polynomial costs)",
                c[0]
            )));
        }
        let n = c[3] as usize;
        if n > 3 || c.len() < 4 + n {
            return Err(GridError::Unsupported(format!(
                "mpc.gencost polynomial with {n} coefficients at line {cline} (degree <= 2 only)"
            )));
        }
        let coeffs = &c[4..4 + n];
        // Highest degree first; pad to (c2, c1, c0).
        let mut full = [0.0; 3];
        full[3 - n..].copy_from_slice(coeffs);
        let bus_id = g[0] as usize;
        if let Some(b) = buses.iter_mut().find(|b| b.id == bus_id) {
            if b.kind == BusKind::REF {
                b.v_set = g[5];
            }
        } else {
            return Err(GridError::UnknownBus { id: bus_id, by: format!("mpc.gen line {line}") });
        }
        generators.push(Generator {
            id: k + 1,
            bus: bus_id,
            p_min: g[9] / base_mva,
            p_max: g[8] / base_mva,
            q_min: g[4] / base_mva,
            q_max: g[3] / base_mva,
            c2: full[0] * base_mva * base_mva,
            c1: full[1] * base_mva,
        });
    }

    let mut branches = Vec::new();
    for (_, r) in &branch.rows {
        if r[10] <= 0.0 {
            continue;
        }
        let rate = if r[5] > 0.0 { r[5] } else { UNLIMITED_RATE_MVA };
        branches.push(Branch {
            from_bus: r[0] as usize,
            to_bus: r[1] as usize,
            series_r: r[2],
            series_x: r[3],
            charging_b: r[4],
            tap_ratio: r[8],
            phase_shift: r[9].to_radians(),
            s_max: rate / base_mva,
            flow_coeffs_fwd: FlowCoeffs::default(),
            flow_coeffs_rev: FlowCoeffs::default(),
        });
    }

    Ok(CaseFile { base_mva, buses, generators, branches })
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(p) => &line[..p],
        None => line,
    }
}

/// Reads a `[ ... ];` matrix starting on line index `start` whose text after
/// `=` is `first`. Rows are separated by `;` or line breaks. Returns the table
/// and the index of the next unread line.
fn read_table(lines: &[&str], start: usize, first: &str) -> Result<(Table, usize), GridError> {
    let mut chunk = first
        .strip_prefix('[')
        .ok_or_else(|| GridError::Parse { line: start + 1, msg: "expected `[`".into() })?
        .to_string();
    let mut rows = Vec::new();
    let mut i = start;
    loop {
        let line = i + 1;
        let (content, done) = match chunk.find(']') {
            Some(end) => (&chunk[..end], true),
            None => (chunk.as_str(), false),
        };
        for segment in content.split(';') {
            let fields: Vec<&str> =
                segment.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            if fields.is_empty() {
                continue;
            }
            let vals = fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| GridError::Parse { line, msg: format!("field `{f}`: {e}") }))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((line, vals));
        }
        i += 1;
        if done {
            break;
        }
        if i >= lines.len() {
            return Err(GridError::Parse { line: start + 1, msg: "unterminated matrix".into() });
        }
        chunk = strip_comment(lines[i]).to_string();
    }
    Ok((Table { rows }, i))
}
