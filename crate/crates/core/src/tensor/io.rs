//! Plain-text tensor format.
//!
//! ```text
//! TENSOR v1
//! name T
//! rank 3
//! extents 2 3 4
//! variance +-+
//! layout colmajor
//! <values, one mode-0 fiber per line>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a write/read cycle is exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{Tensor, TensorError, Variance};

const MAGIC: &str = "TENSOR v1";
const LAYOUT: &str = "colmajor";

impl Tensor {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        match self.name() {
            Some(n) => {
                let _ = writeln!(out, "name {n}");
            }
            None => out.push_str("name\n"),
        }
        let _ = writeln!(out, "rank {}", self.rank());
        out.push_str("extents");
        for e in self.extents() {
            let _ = write!(out, " {e}");
        }
        out.push('\n');
        out.push_str("variance");
        if self.rank() > 0 {
            out.push(' ');
            out.extend(self.variance().iter().map(|v| v.symbol()));
        }
        out.push('\n');
        let _ = writeln!(out, "layout {LAYOUT}");
        let fiber = self.extents().first().copied().unwrap_or(1);
        for chunk in self.data().chunks(fiber) {
            for (i, v) in chunk.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Tensor, TensorError> {
        parse(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Tensor, TensorError> {
        parse(r.lines())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        let file = std::fs::File::open(path)?;
        Tensor::read_text(std::io::BufReader::new(file))
    }
}

fn format_err(line: usize, message: impl Into<String>) -> TensorError {
    TensorError::Format {
        line,
        message: message.into(),
    }
}

fn header<'a>(line_no: usize, line: &'a str, key: &str) -> Result<&'a str, TensorError> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| format_err(line_no, format!("expected `{key}` header")))?;
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(format_err(line_no, format!("expected `{key}` header")));
    }
    Ok(rest.trim())
}

fn parse<I>(lines: I) -> Result<Tensor, TensorError>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let mut lines = lines.enumerate().map(|(i, l)| l.map(|l| (i + 1, l)));
    let mut next_header = |what: &str| -> Result<(usize, String), TensorError> {
        match lines.next() {
            Some(r) => Ok(r?),
            None => Err(format_err(0, format!("missing `{what}` header"))),
        }
    };

    let (n, magic) = next_header(MAGIC)?;
    if magic.trim() != MAGIC {
        return Err(format_err(n, format!("expected `{MAGIC}`")));
    }
    let (n, line) = next_header("name")?;
    let name = header(n, &line, "name")?.to_string();

    let (n, line) = next_header("rank")?;
    let rank: usize = header(n, &line, "rank")?
        .parse()
        .map_err(|_| format_err(n, "rank is not a non-negative integer"))?;

    let (n, line) = next_header("extents")?;
    let extents = header(n, &line, "extents")?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| format_err(n, "extents must be non-negative integers"))?;
    if extents.len() != rank {
        return Err(format_err(n, format!("{} extents for rank {rank}", extents.len())));
    }

    let (n, line) = next_header("variance")?;
    let variance = header(n, &line, "variance")?
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| Variance::from_symbol(c).ok_or_else(|| format_err(n, format!("bad variance marker `{c}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if variance.len() != rank {
        return Err(format_err(n, format!("{} variance markers for rank {rank}", variance.len())));
    }

    let (n, line) = next_header("layout")?;
    let layout = header(n, &line, "layout")?;
    if layout != LAYOUT {
        return Err(format_err(n, format!("unsupported layout `{layout}`")));
    }

    let expected: usize = extents.iter().product();
    let mut data = Vec::with_capacity(expected);
    for item in lines {
        let (n, line) = item?;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format_err(n, format!("bad value `{tok}`")))?;
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(format_err(0, format!("expected {expected} values, found {}", data.len())));
    }
    let t = Tensor::new(&extents, &variance, super::Fill::FromValues(data))?;
    Ok(if name.is_empty() { t } else { t.with_name(name) })
}
