//! Per-epoch training logs as comma-separated text with LF line endings.

use std::fs;
use std::path::Path;

use vseg_core::train::EpochLog;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc,train_dsc,val_dsc,seconds";

/// Values use Rust's shortest round-trip decimal form, so parsing the text
/// back recovers every `f64` exactly.
pub fn format_log(logs: &[EpochLog]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.epoch, l.train_loss, l.val_loss, l.train_acc, l.val_acc, l.train_dsc, l.val_dsc, l.seconds
        ));
    }
    out
}

pub fn write_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    write_atomic(path, format_log(logs).as_bytes())
}

pub fn parse_log(text: &str) -> std::result::Result<Vec<EpochLog>, String> {
    let mut lines = text.split('\n');
    match lines.next() {
        Some(HEADER) => {}
        other => return Err(format!("line 1: expected header `{HEADER}`, found {other:?}")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("line {}: expected 8 fields, found {}", i + 2, f.len()));
        }
        let num = |k: usize| -> std::result::Result<f64, String> {
            f[k].parse().map_err(|_| format!("line {}: bad number `{}`", i + 2, f[k]))
        };
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| format!("line {}: bad epoch `{}`", i + 2, f[0]))?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            train_acc: num(3)?,
            val_acc: num(4)?,
            train_dsc: num(5)?,
            val_dsc: num(6)?,
            seconds: num(7)?,
        });
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
