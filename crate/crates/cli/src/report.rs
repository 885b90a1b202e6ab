//! Comparison table over run manifests. Cells are the manifest numbers
//! printed with their shortest round-trip form; nothing is recomputed.

use scalebench_core::manifest::RunManifest;

pub struct Row {
    pub label: String,
    pub manifest: RunManifest,
}

fn factor_columns(rows: &[Row]) -> Vec<u32> {
    let mut f: Vec<u32> = rows.iter().flat_map(|r| r.manifest.results.per_scale.iter().map(|p| p.factor)).collect();
    f.sort_unstable();
    f.dedup();
    f
}

fn cells(rows: &[Row]) -> (Vec<String>, Vec<Vec<String>>) {
    let factors = factor_columns(rows);
    let mut header = vec!["run".to_string(), "metric".to_string()];
    header.extend(factors.iter().map(|k| format!("1:{k}")));
    header.push("AUC".into());
    let body = rows
        .iter()
        .map(|r| {
            let res = &r.manifest.results;
            let metric = res
                .metric
                .and_then(|m| serde_json::to_value(m).ok())
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| "-".into());
            let mut line = vec![r.label.clone(), metric];
            for k in &factors {
                line.push(
                    res.per_scale.iter().find(|p| p.factor == *k).map_or_else(|| "-".into(), |p| p.score.to_string()),
                );
            }
            line.push(res.auc.map_or_else(|| "-".into(), |a| a.to_string()));
            line
        })
        .collect();
    (header, body)
}

pub fn markdown(rows: &[Row]) -> String {
    let (header, body) = cells(rows);
    let mut out = format!("| {} |\n", header.join(" | "));
    out += &format!("|{}\n", header.iter().map(|_| "---|").collect::<String>());
    for line in body {
        out += &format!("| {} |\n", line.join(" | "));
    }
    out
}

pub fn csv(rows: &[Row]) -> anyhow::Result<String> {
    let (header, body) = cells(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for line in body {
        w.write_record(&line)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
