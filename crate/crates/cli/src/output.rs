use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use fsh_core::real::fmt17;
use fsh_core::{Error, SystemSpec};
use serde::Serialize;
use serde_json::ser::Formatter;
use serde_json::Value;

pub const SCHEMA_VERSION: &str = "fsh.summary/1";

/// Compact JSON with every float in 17 significant digits.
struct Fixed17;

impl Formatter for Fixed17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt17(v).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

pub fn to_json<T: Serialize + ?Sized>(v: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed17);
    v.serialize(&mut ser).expect("serializable value");
    let mut s = String::from_utf8(buf).expect("utf-8 json");
    s.push('\n');
    s
}

#[derive(Serialize)]
pub struct ErrorInfo {
    pub kind: &'static str,
    pub message: String,
}

impl From<&Error> for ErrorInfo {
    fn from(e: &Error) -> Self {
        ErrorInfo { kind: e.kind(), message: e.to_string() }
    }
}

#[derive(Serialize)]
pub struct Summary {
    pub schema_version: &'static str,
    pub command: &'static str,
    pub system: Option<SystemSpec>,
    pub options: Value,
    pub status: &'static str,
    pub result: Option<Value>,
    pub error: Option<ErrorInfo>,
    pub artifacts: Vec<String>,
}

/// Files produced by a command, written only when an output directory is set.
#[derive(Default)]
pub struct Artifacts {
    dir: Option<PathBuf>,
    names: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: Option<&Path>) -> io::Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        Ok(Artifacts { dir: dir.map(Path::to_path_buf), names: Vec::new() })
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = self.names.clone();
        n.sort();
        n
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::write(dir.join(name), contents)?;
        self.names.push(name.to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
        if self.dir.is_none() {
            return Ok(());
        }
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    pub fn summary(&mut self, s: &Summary) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::write(dir.join("summary.json"), to_json(s))
    }
}

pub fn f(x: f64) -> String {
    fmt17(x)
}

/// `a b c` joined by spaces, for list-valued CSV cells.
pub fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}
