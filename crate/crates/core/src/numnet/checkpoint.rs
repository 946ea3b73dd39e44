//! Self-describing text checkpoints of named tensors.
//!
//! ```text
//! survfuse-checkpoint 1
//! meta <key> <value to end of line>
//! group <name> <tensor> <tensor> ...
//! tensor <name> <rows> <cols>
//! <cols whitespace-separated values>      (repeated `rows` times)
//! end
//! ```
//!
//! Values are written in shortest round-trip exponent notation, so
//! write → read reproduces every tensor bit for bit. Names contain no
//! whitespace. `meta` and `group` lines come first in sorted order, followed
//! by tensors in insertion order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::layer::{Activation, DenseLayer, Mlp};
use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAGIC: &str = "survfuse-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    groups: BTreeMap<String, Vec<String>>,
    tensors: Vec<(String, Matrix)>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::invalid("checkpoint name", format!("{name:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        check_name(key)?;
        let value = value.into();
        if value.contains('\n') {
            return Err(Error::invalid("checkpoint meta value", "contains newline"));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: &str, tensor: Matrix) -> Result<()> {
        check_name(name)?;
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_group(&mut self, group: &str, members: Vec<String>) -> Result<()> {
        check_name(group)?;
        for m in &members {
            check_name(m)?;
        }
        self.groups.insert(group.to_string(), members);
        Ok(())
    }

    pub fn group(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (g, members) in &self.groups {
            let _ = writeln!(out, "group {g} {}", members.join(" "));
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            for row in m.iter_rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |row: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            row,
            reason,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == format!("{MAGIC} {VERSION}") => {}
            Some((n, l)) => return Err(bad(n, format!("unrecognised header {l:?}"))),
            None => return Err(bad(0, "empty file".into())),
        }
        let mut ck = Checkpoint::new();
        let mut finished = false;
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.set_meta(k, v).map_err(|e| bad(n, e.to_string()))?;
                }
                "group" => {
                    let mut parts = rest.split_whitespace();
                    let g = parts.next().ok_or_else(|| bad(n, "group without name".into()))?;
                    ck.set_group(g, parts.map(str::to_string).collect())
                        .map_err(|e| bad(n, e.to_string()))?;
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(n, "expected `tensor <name> <rows> <cols>`".into()));
                    }
                    let rows: usize = parts[1].parse().map_err(|_| bad(n, "bad rows".into()))?;
                    let cols: usize = parts[2].parse().map_err(|_| bad(n, "bad cols".into()))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rn, row) = lines
                            .next()
                            .ok_or_else(|| bad(n, format!("tensor {} truncated", parts[0])))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| bad(rn, format!("bad number {tok:?}")))?;
                            data.push(v);
                        }
                        if data.len() - before != cols {
                            return Err(bad(
                                rn,
                                format!("expected {cols} values, found {}", data.len() - before),
                            ));
                        }
                    }
                    let m = Matrix::from_vec(rows, cols, data).map_err(|e| bad(n, e.to_string()))?;
                    ck.insert(parts[0], m).map_err(|e| bad(n, e.to_string()))?;
                }
                "end" => {
                    finished = true;
                    break;
                }
                other => return Err(bad(n, format!("unknown record {other:?}"))),
            }
        }
        if !finished {
            return Err(bad(0, "missing `end` marker".into()));
        }
        for (g, members) in &ck.groups {
            if let Some(m) = members.iter().find(|m| ck.tensor(m).is_none()) {
                return Err(Error::Format {
                    path: origin.to_path_buf(),
                    reason: format!("group {g} names unknown tensor {m}"),
                });
            }
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }

    /// Stores `mlp` under `prefix` and returns the tensor names written.
    pub fn put_mlp(&mut self, prefix: &str, mlp: &Mlp) -> Result<Vec<String>> {
        let acts: Vec<&str> = mlp.layers().iter().map(|l| l.activation().name()).collect();
        self.set_meta(&format!("{prefix}.activations"), acts.join(","))?;
        let mut names = Vec::new();
        for (i, layer) in mlp.layers().iter().enumerate() {
            let w = format!("{prefix}.{i}.weight");
            let b = format!("{prefix}.{i}.bias");
            self.insert(&w, layer.weight().clone())?;
            self.insert(&b, Matrix::row_vector(layer.bias())?)?;
            names.push(w);
            names.push(b);
        }
        Ok(names)
    }

    /// Rebuilds the MLP stored under `prefix` by [`Checkpoint::put_mlp`].
    pub fn get_mlp(&self, prefix: &str) -> Result<Mlp> {
        let missing = |what: String| Error::Format {
            path: PathBuf::from("<checkpoint>"),
            reason: format!("missing {what}"),
        };
        let acts = self
            .meta(&format!("{prefix}.activations"))
            .ok_or_else(|| missing(format!("{prefix}.activations")))?;
        let mut layers = Vec::new();
        for (i, name) in acts.split(',').enumerate() {
            let act = Activation::from_name(name)
                .ok_or_else(|| Error::invalid("activation", name.to_string()))?;
            let w = self
                .tensor(&format!("{prefix}.{i}.weight"))
                .ok_or_else(|| missing(format!("{prefix}.{i}.weight")))?;
            let b = self
                .tensor(&format!("{prefix}.{i}.bias"))
                .ok_or_else(|| missing(format!("{prefix}.{i}.bias")))?;
            layers.push(DenseLayer::from_parts(w.clone(), b.as_slice().to_vec(), act)?);
        }
        Mlp::from_layers(layers)
    }
}
