//! CSV emission of result tables and per-figure layouts.
//!
//! Every file starts with a header row. Reals are written with Rust's
//! shortest round-trip formatting, so re-reading a cell gives back the exact
//! value. Missing values (e.g. no area cell) are empty cells.

use std::io::Write;
use std::path::Path;

use super::runner::{CrbRow, ResultRow, ResultTable};
use crate::error::{invalid, Result};

/// Figure layouts understood by [`emit_figure_data`].
pub const FIGURE_IDS: [&str; 7] = ["fig6", "fig7", "fig8", "fig9", "fig10", "fig11", "fig12"];

/// Column order of [`emit_csv`].
pub const TABLE_HEADER: [&str; 20] = [
    "variant",
    "t1",
    "t2_y",
    "t2_z",
    "n_r",
    "p_bs_dbm",
    "cell_x",
    "cell_y",
    "trials_ok",
    "trials_failed",
    "rmse_mu_bs",
    "rmse_nu_bs",
    "rmse_mu_irs",
    "rmse_nu_irs",
    "rmse_q",
    "sqrt_crb_mu_bs",
    "sqrt_crb_nu_bs",
    "sqrt_crb_mu_irs",
    "sqrt_crb_nu_irs",
    "regime",
];

type Table = (Vec<&'static str>, Vec<Vec<String>>);

fn num(v: f64) -> String {
    format!("{v}")
}

fn cell(c: Option<(f64, f64)>) -> (String, String) {
    c.map(|(x, y)| (num(x), num(y))).unwrap_or_default()
}

fn write_table<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(std::io::Error::from)?;
    for r in rows {
        w.write_record(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn write_file(path: &Path, table: &Table) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_table(std::io::BufWriter::new(file), &table.0, &table.1)
}

fn full_row(r: &ResultRow) -> Vec<String> {
    let (cx, cy) = cell(r.cell);
    vec![
        r.variant.clone(),
        r.t1.to_string(),
        r.t2_y.to_string(),
        r.t2_z.to_string(),
        r.n_r.to_string(),
        num(r.p_bs_dbm),
        cx,
        cy,
        r.trials_ok.to_string(),
        r.trials_failed.to_string(),
        num(r.rmse_mu_bs),
        num(r.rmse_nu_bs),
        num(r.rmse_mu_irs),
        num(r.rmse_nu_irs),
        num(r.rmse_q),
        num(r.sqrt_crb_mu_bs),
        num(r.sqrt_crb_nu_bs),
        num(r.sqrt_crb_mu_irs),
        num(r.sqrt_crb_nu_irs),
        r.regime.clone(),
    ]
}

/// Every aggregate column, in [`TABLE_HEADER`] order.
pub fn table_csv(table: &ResultTable) -> Table {
    (TABLE_HEADER.to_vec(), table.rows.iter().map(full_row).collect())
}

/// Write the full result table.
pub fn emit_csv(table: &ResultTable, path: &Path) -> Result<()> {
    write_file(path, &table_csv(table))
}

fn project(table: &ResultTable, header: Vec<&'static str>, f: impl Fn(&ResultRow) -> Vec<String>) -> Table {
    (header, table.rows.iter().map(f).collect())
}

/// Columns of one figure layout.
pub fn figure_table(table: &ResultTable, figure_id: &str) -> Result<Table> {
    Ok(match figure_id {
        "fig6" => project(
            table,
            vec!["variant", "p_bs_dbm", "rmse_mu_bs", "rmse_nu_bs", "sqrt_crb_mu_bs", "sqrt_crb_nu_bs"],
            |r| {
                vec![
                    r.variant.clone(),
                    num(r.p_bs_dbm),
                    num(r.rmse_mu_bs),
                    num(r.rmse_nu_bs),
                    num(r.sqrt_crb_mu_bs),
                    num(r.sqrt_crb_nu_bs),
                ]
            },
        ),
        "fig7" => project(
            table,
            vec!["variant", "n_r", "p_bs_dbm", "rmse_mu_irs", "rmse_nu_irs", "sqrt_crb_mu_irs", "sqrt_crb_nu_irs"],
            |r| {
                vec![
                    r.variant.clone(),
                    r.n_r.to_string(),
                    num(r.p_bs_dbm),
                    num(r.rmse_mu_irs),
                    num(r.rmse_nu_irs),
                    num(r.sqrt_crb_mu_irs),
                    num(r.sqrt_crb_nu_irs),
                ]
            },
        ),
        "fig8" => project(table, vec!["variant", "t2", "p_bs_dbm", "rmse_mu_irs", "rmse_nu_irs"], |r| {
            vec![
                r.variant.clone(),
                (r.t2_y + r.t2_z).to_string(),
                num(r.p_bs_dbm),
                num(r.rmse_mu_irs),
                num(r.rmse_nu_irs),
            ]
        }),
        "fig9" | "fig12" => project(
            table,
            vec!["variant", "t1", "t2", "n_r", "p_bs_dbm", "rmse_q", "trials_ok", "trials_failed"],
            |r| {
                vec![
                    r.variant.clone(),
                    r.t1.to_string(),
                    (r.t2_y + r.t2_z).to_string(),
                    r.n_r.to_string(),
                    num(r.p_bs_dbm),
                    num(r.rmse_q),
                    r.trials_ok.to_string(),
                    r.trials_failed.to_string(),
                ]
            },
        ),
        "fig10" => {
            if table.rows.iter().any(|r| r.cell.is_none()) {
                return Err(invalid("fig10 needs an area sweep ([experiment.area])"));
            }
            project(
                table,
                vec!["variant", "cell_x", "cell_y", "p_bs_dbm", "rmse_q", "trials_ok", "trials_failed"],
                |r| {
                    let (cx, cy) = cell(r.cell);
                    vec![
                        r.variant.clone(),
                        cx,
                        cy,
                        num(r.p_bs_dbm),
                        num(r.rmse_q),
                        r.trials_ok.to_string(),
                        r.trials_failed.to_string(),
                    ]
                },
            )
        }
        "fig11" => {
            let header = vec![
                "point_index",
                "trial_index",
                "p_bs_dbm",
                "target",
                "surface",
                "true_mu_bs",
                "true_nu_bs",
                "est_mu_bs",
                "est_nu_bs",
                "true_mu_composite",
                "true_nu_composite",
                "est_mu_composite",
                "est_nu_composite",
            ];
            let mut rows = Vec::new();
            for rec in table.trials.iter().filter(|r| r.error.is_none()) {
                for (k, o) in rec.targets.iter().enumerate() {
                    for (m, (t, e)) in o.true_irs.iter().zip(&o.est_irs).enumerate() {
                        let off = rec.surface_offsets[m];
                        rows.push(vec![
                            rec.point_index.to_string(),
                            rec.trial_index.to_string(),
                            num(rec.p_bs_dbm),
                            k.to_string(),
                            m.to_string(),
                            num(o.true_bs.mu),
                            num(o.true_bs.nu),
                            num(o.est_bs.mu),
                            num(o.est_bs.nu),
                            num(t.mu + off.mu),
                            num(t.nu + off.nu),
                            num(e.mu + off.mu),
                            num(e.nu + off.nu),
                        ]);
                    }
                }
            }
            (header, rows)
        }
        other => {
            return Err(invalid(format!("unknown figure id {other:?}; expected one of {}", FIGURE_IDS.join(", "))))
        }
    })
}

/// Write the layout of `figure_id` (one of [`FIGURE_IDS`]).
pub fn emit_figure_data(table: &ResultTable, figure_id: &str, path: &Path) -> Result<()> {
    write_file(path, &figure_table(table, figure_id)?)
}

/// Write analytic CRB rows.
pub fn emit_crb_csv<W: Write>(rows: &[CrbRow], out: W) -> Result<()> {
    let header = [
        "variant",
        "p_bs_dbm",
        "target",
        "surface",
        "sqrt_crb_mu_bs",
        "sqrt_crb_nu_bs",
        "sqrt_crb_mu_irs",
        "sqrt_crb_nu_irs",
        "regime",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                num(r.p_bs_dbm),
                r.target.to_string(),
                r.surface.to_string(),
                num(r.sqrt_crb_mu_bs),
                num(r.sqrt_crb_nu_bs),
                num(r.sqrt_crb_mu_irs),
                num(r.sqrt_crb_nu_irs),
                r.regime.clone(),
            ]
        })
        .collect();
    write_table(out, &header, &body)
}

/// Write a table to any writer (used for stdout output).
pub fn write_csv<W: Write>(out: W, table: &Table) -> Result<()> {
    write_table(out, &table.0, &table.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{Position3, SpatialAnglePair};
    use crate::harness::runner::{TargetOutcome, TrialRecord};

    fn row(cell: Option<(f64, f64)>) -> ResultRow {
        ResultRow {
            variant: "a".into(),
            t1: 24,
            t2_y: 10,
            t2_z: 10,
            n_r: 30,
            p_bs_dbm: 30.0,
            cell,
            trials_ok: 2,
            trials_failed: 1,
            rmse_mu_bs: 0.1 + 0.2,
            rmse_nu_bs: 1e-7,
            rmse_mu_irs: f64::NAN,
            rmse_nu_irs: 0.0,
            rmse_q: 0.5,
            sqrt_crb_mu_bs: 1.0,
            sqrt_crb_nu_bs: 2.0,
            sqrt_crb_mu_irs: f64::INFINITY,
            sqrt_crb_nu_irs: 3.0,
            regime: "irs_dominant".into(),
        }
    }

    fn table() -> ResultTable {
        let a = SpatialAnglePair::new(0.1, 0.2);
        let p = Position3::new(1.0, 2.0, 3.0);
        let rec = TrialRecord {
            point_index: 0,
            trial_index: 0,
            seed: 9,
            variant: "a".into(),
            p_bs_dbm: 30.0,
            cell: None,
            targets: vec![TargetOutcome {
                true_bs: a,
                est_bs: a,
                true_irs: vec![a],
                est_irs: vec![a],
                true_position: p,
                est_position: p,
            }],
            surface_offsets: vec![SpatialAnglePair::new(0.5, 0.0)],
            error: None,
            regimes: vec![],
            wall_time_s: 0.0,
        };
        ResultTable { rows: vec![row(None)], trials: vec![rec] }
    }

    fn render(t: &Table) -> String {
        let mut buf = Vec::new();
        write_csv(&mut buf, t).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn header_and_full_precision() {
        let text = render(&table_csv(&table()));
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TABLE_HEADER.join(","));
        let body = lines.next().unwrap();
        assert!(body.contains("0.30000000000000004"));
        assert!(body.contains("0.0000001"));
        assert!(body.contains("NaN") && body.contains("inf"));
        let parsed: f64 = body.split(',').nth(10).unwrap().parse().unwrap();
        assert_eq!(parsed, 0.1 + 0.2);
    }

    #[test]
    fn every_figure_has_a_header() {
        let mut t = table();
        for id in FIGURE_IDS {
            if id == "fig10" {
                assert!(figure_table(&t, id).is_err());
                continue;
            }
            let ft = figure_table(&t, id).unwrap();
            assert!(!ft.0.is_empty());
            assert!(ft.1.iter().all(|r| r.len() == ft.0.len()));
        }
        t.rows[0].cell = Some((-10.0, 2.5));
        let f10 = figure_table(&t, "fig10").unwrap();
        assert_eq!(f10.1[0][1], "-10");
        assert_eq!(f10.1[0][2], "2.5");
        assert!(figure_table(&t, "fig13").is_err());
    }

    #[test]
    fn fig11_adds_offset_to_surface_angles() {
        let ft = figure_table(&table(), "fig11").unwrap();
        assert_eq!(ft.1[0][9], "0.6");
    }

    #[test]
    fn re_emission_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        emit_csv(&table(), &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        emit_csv(&table(), &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        emit_figure_data(&table(), "fig6", &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("variant,p_bs_dbm"));
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("out.csv");
        assert!(emit_csv(&table(), &path).is_err());
    }
}
