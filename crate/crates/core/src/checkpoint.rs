//! Plain-text parameter checkpoints.
//!
//! ```text
//! cpcm-params v1
//! config hidden_dim=32 num_blocks=2 k_neighbors=8 num_classes=4 init_seed=0
//! input.weight 6 32
//! <row of 32 values>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::model::{Linear, ModelConfig, ModelParams};

const MAGIC: &str = "cpcm-params v1";

pub fn format_params(params: &ModelParams) -> String {
    let c = params.config();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "config hidden_dim={} num_blocks={} k_neighbors={} num_classes={} init_seed={}",
        c.hidden_dim, c.num_blocks, c.k_neighbors, c.num_classes, c.init_seed
    );
    for layer in params.layers() {
        for (suffix, m) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let _ = writeln!(out, "{}.{suffix} {} {}", layer.name, m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
    }
    out
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    parse_params(&fs::read_to_string(path)?, path)
}

pub fn parse_params(text: &str, path: &Path) -> Result<ModelParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, msg: String| Error::parse(path, line, msg);

    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((n, other)) => return Err(err(n, format!("expected {MAGIC:?}, found {other:?}"))),
        None => return Err(err(1, "empty checkpoint".into())),
    }

    let (n, line) = lines.next().ok_or_else(|| err(2, "missing config line".into()))?;
    let mut fields = line.split_whitespace();
    if fields.next() != Some("config") {
        return Err(err(n, "expected config line".into()));
    }
    let mut config = ModelConfig::default();
    let mut seen = 0;
    for kv in fields {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(n, format!("malformed field {kv:?}")))?;
        let bad = |_| err(n, format!("invalid value for {k}: {v:?}"));
        match k {
            "hidden_dim" => config.hidden_dim = v.parse().map_err(bad)?,
            "num_blocks" => config.num_blocks = v.parse().map_err(bad)?,
            "k_neighbors" => config.k_neighbors = v.parse().map_err(bad)?,
            "num_classes" => config.num_classes = v.parse().map_err(bad)?,
            "init_seed" => config.init_seed = v.parse().map_err(bad)?,
            _ => return Err(err(n, format!("unknown config field {k:?}"))),
        }
        seen += 1;
    }
    if seen != 5 {
        return Err(err(n, "config line needs all five fields".into()));
    }

    let mut arrays: Vec<(String, Matrix)> = Vec::new();
    while let Some((n, header)) = lines.next() {
        if header.is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(err(n, format!("expected \"name rows cols\", found {header:?}")));
        };
        let rows: usize = rows.parse().map_err(|_| err(n, format!("bad row count {rows:?}")))?;
        let cols: usize = cols.parse().map_err(|_| err(n, format!("bad column count {cols:?}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rn, row) = lines
                .next()
                .ok_or_else(|| err(n, format!("{name}: truncated after {} rows", data.len() / cols.max(1))))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| err(rn, format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(err(rn, format!("{name}: expected {cols} values, found {}", data.len() - before)));
            }
        }
        arrays.push((name.to_string(), Matrix::new(rows, cols, data)?));
    }

    if arrays.len() % 2 != 0 {
        return Err(err(0, "weight without bias".into()));
    }
    let mut layers = Vec::with_capacity(arrays.len() / 2);
    for pair in arrays.chunks(2) {
        let (wn, w) = &pair[0];
        let (bn, b) = &pair[1];
        let name = wn
            .strip_suffix(".weight")
            .ok_or_else(|| err(0, format!("expected a weight array, found {wn:?}")))?;
        if bn.strip_suffix(".bias") != Some(name) {
            return Err(err(0, format!("expected {name}.bias, found {bn:?}")));
        }
        layers.push(Linear {
            name: name.to_string(),
            weight: w.clone(),
            bias: b.clone(),
        });
    }
    ModelParams::from_layers(config, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::init(ModelConfig {
            init_seed: 42,
            num_classes: 5,
            ..Default::default()
        })
        .unwrap();
        let text = format_params(&params);
        let back = parse_params(&text, Path::new("mem")).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(parse_params("nope\n", Path::new("x")).is_err());
        let params = ModelParams::init(ModelConfig::default()).unwrap();
        let text = format_params(&params);
        let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(parse_params(&cut, Path::new("x")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.txt");
        let params = ModelParams::init(ModelConfig::default()).unwrap();
        save_params(&params, &p).unwrap();
        assert_eq!(load_params(&p).unwrap(), params);
        assert!(load_params(dir.path().join("missing")).is_err());
    }
}
