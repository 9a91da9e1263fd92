//! CSV and SVG reports in the decoder-comparison, PEFT-comparison and
//! full ID/DG layouts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::matrix::DgMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub matrix_csv: PathBuf,
    pub matrix_json: PathBuf,
    pub decoder_csv: PathBuf,
    pub peft_csv: PathBuf,
    pub table_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a CSV written by [`emit_reports`] into header-keyed rows.
pub fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            Ok(header.iter().cloned().zip(rec.iter().map(String::from)).collect())
        })
        .collect()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Grouped ID/DG bar chart as SVG.
fn bar_svg(title: &str, labels: &[String], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let colors = ["#4c72b0", "#dd8452", "#55a868"];
    let group_w = 24.0 * series.len() as f64 + 16.0;
    let (left, top, plot_h) = (48.0, 32.0, 220.0);
    let width = left + group_w * labels.len() as f64 + 24.0;
    let height = top + plot_h + 110.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{title}</text>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/><text x=\"8\" y=\"{}\">{v:.2}</text>",
            width - 16.0,
            y + 4.0
        );
    }
    for (i, label) in labels.iter().enumerate() {
        let x0 = left + group_w * i as f64 + 8.0;
        for (j, (_, values)) in series.iter().enumerate() {
            if let Some(v) = values[i] {
                let h = plot_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="20" height="{h}" fill="{}"><title>{v}</title></rect>"#,
                    x0 + 24.0 * j as f64,
                    top + plot_h - h,
                    colors[j % colors.len()]
                );
            }
        }
        let (lx, ly) = (x0 + 4.0, top + plot_h + 12.0);
        let _ = writeln!(
            s,
            r#"<text x="{lx}" y="{ly}" transform="rotate(45 {lx} {ly})">{}</text>"#,
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    for (j, (name, _)) in series.iter().enumerate() {
        let x = left + 60.0 * j as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            height - 14.0,
            colors[j % colors.len()],
            x + 14.0,
            height - 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `dg_matrix.csv`, `dg_matrix.json`, the three layout CSVs and a bar plot per layout.
pub fn emit_reports(m: &DgMatrix, out: &Path) -> Result<ReportFiles> {
    if m.is_empty() && m.assemblies.is_empty() {
        return Err(Error::Data("cannot emit reports for an empty matrix".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let info = |id: &str| m.assemblies.get(id).cloned();

    // Long-format matrix.
    let matrix_csv = out.join("dg_matrix.csv");
    let mut rows = Vec::new();
    for c in m.cells() {
        let a = info(&c.assembly_id);
        let (bb, pf, dec) = a
            .map(|a| (a.backbone, a.peft, a.decoder))
            .unwrap_or_default();
        let base = [c.source.clone(), c.target.clone(), c.assembly_id.clone(), bb, pf, dec];
        for (k, d) in c.per_class.iter().enumerate() {
            let mut r = base.to_vec();
            r.extend([k.to_string(), d.to_string()]);
            rows.push(r);
        }
        let mut r = base.to_vec();
        r.extend(["mean".to_string(), c.mean.to_string()]);
        rows.push(r);
    }
    write_rows(
        &matrix_csv,
        &strs(&["source", "target", "assembly_id", "backbone", "peft", "decoder", "class", "dice"]),
        &rows,
    )?;
    let matrix_json = out.join("dg_matrix.json");
    fs::write(&matrix_json, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&matrix_json, e))?;

    // Registered assemblies without cells (failed runs) still get a row.
    let ids: Vec<String> = m
        .assembly_ids()
        .into_iter()
        .chain(m.assemblies.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    // Decoder comparison: averaged over every assembly sharing a decoder.
    let mut by_decoder: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in &ids {
        let dec = info(id).map(|a| a.decoder).unwrap_or_else(|| id.clone());
        by_decoder.entry(dec).or_default().push(id.clone());
    }
    let decoder_csv = out.join("decoder_comparison.csv");
    let mut labels = Vec::new();
    let (mut id_s, mut dg_s) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for (dec, members) in &by_decoder {
        let params: Vec<usize> = members.iter().filter_map(|i| info(i)).map(|a| a.trainable_params).collect();
        let params = if params.is_empty() {
            String::new()
        } else {
            (params.iter().sum::<usize>() as f64 / params.len() as f64).round().to_string()
        };
        let idv = mean_opt(members.iter().map(|i| m.id_grand(i)));
        let dgv = mean_opt(members.iter().map(|i| m.dg_grand(i)));
        rows.push(vec![dec.clone(), params, fmt_opt(idv), fmt_opt(dgv)]);
        labels.push(dec.clone());
        id_s.push(idv);
        dg_s.push(dgv);
    }
    write_rows(&decoder_csv, &strs(&["decoder", "trainable_params", "ID", "DG"]), &rows)?;
    let mut plots = vec![out.join("decoder_comparison.svg")];
    fs::write(&plots[0], bar_svg("Decoder comparison", &labels, &[("ID", id_s), ("DG", dg_s)]))
        .map_err(|e| Error::io(&plots[0], e))?;

    // PEFT × backbone grid, averaged over decoders.
    let mut by_peft: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for id in &ids {
        let a = info(id);
        let key = a.map(|a| (a.peft, a.backbone)).unwrap_or_else(|| (id.clone(), String::new()));
        by_peft.entry(key).or_default().push(id.clone());
    }
    let peft_csv = out.join("peft_comparison.csv");
    let (mut labels, mut id_s, mut dg_s, mut av_s, mut rows) = (vec![], vec![], vec![], vec![], vec![]);
    for ((peft, bb), members) in &by_peft {
        let idv = mean_opt(members.iter().map(|i| m.id_grand(i)));
        let dgv = mean_opt(members.iter().map(|i| m.dg_grand(i)));
        let avv = match (idv, dgv) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        };
        rows.push(vec![peft.clone(), bb.clone(), fmt_opt(idv), fmt_opt(dgv), fmt_opt(avv)]);
        labels.push(format!("{peft} {bb}"));
        id_s.push(idv);
        dg_s.push(dgv);
        av_s.push(avv);
    }
    write_rows(&peft_csv, &strs(&["peft", "backbone", "ID", "DG", "AV"]), &rows)?;
    plots.push(out.join("peft_comparison.svg"));
    fs::write(
        &plots[1],
        bar_svg("PEFT comparison", &labels, &[("ID", id_s), ("DG", dg_s), ("AV", av_s)]),
    )
    .map_err(|e| Error::io(&plots[1], e))?;

    // Full table: one row per (assembly, source), one column per target.
    let all_targets: BTreeSet<String> = m.cells().map(|c| c.target.clone()).collect();
    let mut header = strs(&["assembly_id", "backbone", "peft", "decoder", "source", "ID"]);
    header.extend(all_targets.iter().cloned());
    header.push("DG".into());
    let table_csv = out.join("id_dg_table.csv");
    let (mut labels, mut id_s, mut dg_s, mut rows) = (vec![], vec![], vec![], vec![]);
    for id in &ids {
        let a = info(id);
        for src in m.sources(id) {
            let mut r = vec![id.clone()];
            r.extend(match &a {
                Some(a) => [a.backbone.clone(), a.peft.clone(), a.decoder.clone()],
                None => Default::default(),
            });
            r.push(src.clone());
            let idv = m.id(&src, id);
            r.push(fmt_opt(idv));
            for t in &all_targets {
                let v = if *t == src { None } else { m.get(&src, t, id).map(|c| c.mean) };
                r.push(fmt_opt(v));
            }
            let dgv = m.dg_mean(&src, id);
            r.push(fmt_opt(dgv));
            rows.push(r);
            labels.push(format!("{id} {src}"));
            id_s.push(idv);
            dg_s.push(dgv);
        }
    }
    write_rows(&table_csv, &header, &rows)?;
    plots.push(out.join("id_dg_table.svg"));
    fs::write(&plots[2], bar_svg("ID and DG per source", &labels, &[("ID", id_s), ("DG", dg_s)]))
        .map_err(|e| Error::io(&plots[2], e))?;

    Ok(ReportFiles {
        matrix_csv,
        matrix_json,
        decoder_csv,
        peft_csv,
        table_csv,
        plots,
    })
}
